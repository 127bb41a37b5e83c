//! New-classes (NC) and new-instances (NI) experience streams.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Nc,
    Ni,
}

impl Scenario {
    pub fn default_experiences(self) -> usize {
        match self {
            Scenario::Nc => 5,
            Scenario::Ni => 8,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Nc => "nc",
            Scenario::Ni => "ni",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "nc" => Ok(Scenario::Nc),
            "ni" => Ok(Scenario::Ni),
            _ => Err(format!("unknown scenario {s:?} (expected nc or ni)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("experience count must be positive")]
    NoExperiences,
    #[error("{classes} classes cannot be split evenly into {experiences} experiences")]
    ClassesNotDivisible { classes: usize, experiences: usize },
    #[error("class {class} has {instances} instances, not a positive multiple of {experiences} experiences")]
    InstancesNotDivisible { class: u16, instances: usize, experiences: usize },
    #[error("test fraction {0} outside [0, 1)")]
    TestFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Experience {
    /// Zero-based position in the stream.
    pub index: usize,
    /// Dataset indices, in dataset order.
    pub samples: Vec<usize>,
    pub class_set: BTreeSet<u32>,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub experiences: Vec<Experience>,
    /// Held-out dataset indices, sorted; shared by every evaluation.
    pub test: Vec<usize>,
}

/// Holds out `test_fraction` of every (class, instance) group, then splits
/// the remainder into `experience_count` experiences.
pub fn build_scenario(
    dataset: &Dataset,
    scenario: Scenario,
    experience_count: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Split, ScenarioError> {
    if experience_count == 0 {
        return Err(ScenarioError::NoExperiences);
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(ScenarioError::TestFraction(test_fraction));
    }
    let mut groups: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        groups.entry((s.class, s.instance)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    let mut train: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
    for (key, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        let mut rest = idx[n_test..].to_vec();
        rest.sort_unstable();
        train.insert(key, rest);
    }
    test.sort_unstable();

    let classes = dataset.class_count();
    let assign: Box<dyn Fn(u16, u16) -> usize> = match scenario {
        Scenario::Nc => {
            if !classes.is_multiple_of(experience_count) {
                return Err(ScenarioError::ClassesNotDivisible { classes, experiences: experience_count });
            }
            let per = classes / experience_count;
            Box::new(move |class, _| class as usize / per)
        }
        Scenario::Ni => {
            let mut slots: BTreeMap<(u16, u16), usize> = BTreeMap::new();
            for class in 0..classes as u16 {
                let instances: Vec<u16> = train.keys().filter(|k| k.0 == class).map(|k| k.1).collect();
                let n = instances.len();
                if n == 0 || !n.is_multiple_of(experience_count) {
                    return Err(ScenarioError::InstancesNotDivisible { class, instances: n, experiences: experience_count });
                }
                let per = n / experience_count;
                for (rank, inst) in instances.into_iter().enumerate() {
                    slots.insert((class, inst), rank / per);
                }
            }
            Box::new(move |class, inst| slots[&(class, inst)])
        }
    };

    let mut experiences: Vec<Experience> = (0..experience_count)
        .map(|index| Experience { index, samples: Vec::new(), class_set: BTreeSet::new(), scenario })
        .collect();
    for (&(class, inst), idx) in &train {
        let e = &mut experiences[assign(class, inst)];
        e.samples.extend_from_slice(idx);
        if !idx.is_empty() {
            e.class_set.insert(class as u32);
        }
    }
    for e in &mut experiences {
        e.samples.sort_unstable();
    }
    Ok(Split { experiences, test })
}
