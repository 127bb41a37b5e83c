//! Labelled feature vectors and their on-disk formats.
//!
//! `BNDS` layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BNDS"
//! 4       4     u32 version (1)
//! 8       4     u32 sample count N
//! 12      4     u32 feature dimension D
//! 16      ...   N records of: D × f32, u16 class, u16 instance
//! ```
//!
//! The text format holds one sample per line, `class, instance, f1, …, fD`,
//! separated by commas and/or spaces. Lines starting with `#` are skipped.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const BNDS_MAGIC: [u8; 4] = *b"BNDS";
pub const BNDS_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("not a BNDS file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported BNDS version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sample {index} has {found} features, expected {expected}")]
    DimMismatch { index: usize, expected: usize, found: usize },
    #[error("class ids are not dense: {missing} is missing below {max}")]
    NonDenseClasses { missing: u16, max: u16 },
    #[error("sample {index} has a non-finite feature")]
    NonFinite { index: usize },
    #[error("dataset has no samples")]
    Empty,
    #[error("dimension and counts must be positive")]
    ZeroSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f32>,
    pub class: u16,
    pub instance: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_count: usize,
    input_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Bnds,
    Text,
    /// `Bnds` when the file starts with the magic, `Text` otherwise.
    Detect,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self, DatasetError> {
        let input_dim = samples.first().ok_or(DatasetError::Empty)?.features.len();
        if input_dim == 0 {
            return Err(DatasetError::ZeroSize);
        }
        let mut seen = BTreeSet::new();
        for (index, s) in samples.iter().enumerate() {
            if s.features.len() != input_dim {
                return Err(DatasetError::DimMismatch { index, expected: input_dim, found: s.features.len() });
            }
            if s.features.iter().any(|f| !f.is_finite()) {
                return Err(DatasetError::NonFinite { index });
            }
            seen.insert(s.class);
        }
        let max = *seen.iter().next_back().expect("non-empty");
        if let Some(missing) = (0..=max).find(|c| !seen.contains(c)) {
            return Err(DatasetError::NonDenseClasses { missing, max });
        }
        Ok(Dataset { samples, class_count: max as usize + 1, input_dim })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn to_bnds(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (4 * self.input_dim + 4));
        out.extend_from_slice(&BNDS_MAGIC);
        out.extend_from_slice(&BNDS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        for s in &self.samples {
            for f in &s.features {
                out.extend_from_slice(&f.to_le_bytes());
            }
            out.extend_from_slice(&s.class.to_le_bytes());
            out.extend_from_slice(&s.instance.to_le_bytes());
        }
        out
    }

    pub fn from_bnds(bytes: &[u8]) -> Result<Self, DatasetError> {
        let need = |offset: usize, n: usize| {
            if bytes.len() < offset + n {
                Err(DatasetError::Truncated { offset, needed: offset + n - bytes.len() })
            } else {
                Ok(())
            }
        };
        need(0, 4)?;
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != BNDS_MAGIC {
            return Err(DatasetError::BadMagic(magic));
        }
        need(4, HEADER_LEN - 4)?;
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != BNDS_VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let count = word(8) as usize;
        let dim = word(12) as usize;
        let record = 4 * dim + 4;
        need(HEADER_LEN, count * record)?;
        let end = HEADER_LEN + count * record;
        if bytes.len() > end {
            return Err(DatasetError::TrailingBytes(bytes.len() - end));
        }
        let samples = bytes[HEADER_LEN..end]
            .chunks_exact(record)
            .map(|r| {
                let features = r[..4 * dim].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                let class = u16::from_le_bytes([r[4 * dim], r[4 * dim + 1]]);
                let instance = u16::from_le_bytes([r[4 * dim + 2], r[4 * dim + 3]]);
                Sample { features, class, instance }
            })
            .collect();
        Dataset::new(samples)
    }

    pub fn from_text<R: Read>(reader: R) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut samples = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| DatasetError::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            // Space-separated lines arrive as a single field.
            let fields: Vec<&str> = record.iter().flat_map(str::split_whitespace).collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() < 3 {
                return Err(DatasetError::Parse { line, message: "expected class, instance and features".into() });
            }
            let bad = |what: &str, v: &str| DatasetError::Parse { line, message: format!("invalid {what} {v:?}") };
            let class = fields[0].parse().map_err(|_| bad("class", fields[0]))?;
            let instance = fields[1].parse().map_err(|_| bad("instance", fields[1]))?;
            let features = fields[2..].iter().map(|f| f.parse::<f32>().map_err(|_| bad("feature", f))).collect::<Result<_, _>>()?;
            samples.push(Sample { features, class, instance });
        }
        if samples.is_empty() {
            return Err(DatasetError::Parse { line: 0, message: "no samples in input".into() });
        }
        Dataset::new(samples)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&format!("{}, {}", s.class, s.instance));
            for f in &s.features {
                out.push_str(&format!(", {f:?}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset, crate::HarnessError> {
    let bytes = fs::read(path)?;
    let format = match format {
        Format::Detect if bytes.starts_with(&BNDS_MAGIC) => Format::Bnds,
        Format::Detect => Format::Text,
        f => f,
    };
    Ok(match format {
        Format::Bnds => Dataset::from_bnds(&bytes)?,
        _ => Dataset::from_text(bytes.as_slice())?,
    })
}

pub fn save_bnds(dataset: &Dataset, path: &Path) -> Result<(), crate::HarnessError> {
    fs::write(path, dataset.to_bnds())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub instances_per_class: usize,
    pub samples_per_instance: usize,
    pub dim: usize,
    /// Standard deviation of the class centres; noise per sample is 1.
    pub separation: f64,
    /// Standard deviation of instance offsets around their class centre.
    pub instance_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            instances_per_class: 8,
            samples_per_instance: 100,
            dim: 64,
            separation: 1.0,
            instance_spread: 0.5,
            seed: 0,
        }
    }
}

/// Gaussian clusters: one centre per class, one offset per instance, unit
/// noise per sample. Samples are ordered by class, then instance.
pub fn make_synthetic(config: &SyntheticConfig) -> Result<Dataset, DatasetError> {
    let c = config;
    if c.classes == 0 || c.instances_per_class == 0 || c.samples_per_instance == 0 || c.dim == 0 {
        return Err(DatasetError::ZeroSize);
    }
    if c.classes > u16::MAX as usize + 1 || c.instances_per_class > u16::MAX as usize + 1 {
        return Err(DatasetError::ZeroSize);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(c.classes * c.instances_per_class * c.samples_per_instance);
    for class in 0..c.classes {
        let centre: Vec<f64> = (0..c.dim).map(|_| c.separation * unit.sample(&mut rng)).collect();
        for instance in 0..c.instances_per_class {
            let offset: Vec<f64> = centre.iter().map(|m| m + c.instance_spread * unit.sample(&mut rng)).collect();
            for _ in 0..c.samples_per_instance {
                let features = offset.iter().map(|m| (m + unit.sample(&mut rng)) as f32).collect();
                samples.push(Sample { features, class: class as u16, instance: instance as u16 });
            }
        }
    }
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_a_parse_error() {
        assert!(matches!(Dataset::from_text(&b""[..]), Err(DatasetError::Parse { .. })));
    }

    #[test]
    fn hand_written_text() {
        let text = "# class, instance, features\n0, 0, 1.5, -2\n1 1 0.25 4\n0, 1, 0, 0\n";
        let d = Dataset::from_text(text.as_bytes()).unwrap();
        let expected = vec![
            Sample { features: vec![1.5, -2.0], class: 0, instance: 0 },
            Sample { features: vec![0.25, 4.0], class: 1, instance: 1 },
            Sample { features: vec![0.0, 0.0], class: 0, instance: 1 },
        ];
        assert_eq!(d.samples(), expected.as_slice());
        assert_eq!((d.class_count(), d.input_dim()), (2, 2));
    }

    #[test]
    fn distinct_errors() {
        let dim = Dataset::from_text("0, 0, 1, 2\n0, 0, 1\n".as_bytes());
        assert!(matches!(dim, Err(DatasetError::DimMismatch { index: 1, expected: 2, found: 1 })));
        let dense = Dataset::from_text("0, 0, 1\n2, 0, 1\n".as_bytes());
        assert!(matches!(dense, Err(DatasetError::NonDenseClasses { missing: 1, max: 2 })));
        let mut bytes = make_synthetic(&SyntheticConfig { classes: 2, samples_per_instance: 2, ..Default::default() })
            .unwrap()
            .to_bnds();
        bytes[0] = b'X';
        assert!(matches!(Dataset::from_bnds(&bytes), Err(DatasetError::BadMagic(_))));
        assert!(matches!(Dataset::from_bnds(&BNDS_MAGIC), Err(DatasetError::Truncated { .. })));
    }

    #[test]
    fn synthetic_layout() {
        let config = SyntheticConfig { instances_per_class: 5, samples_per_instance: 3, ..Default::default() };
        let d = make_synthetic(&config).unwrap();
        assert_eq!(d.len(), 10 * 5 * 3);
        for class in 0..10u16 {
            let ids: BTreeSet<u16> = d.samples().iter().filter(|s| s.class == class).map(|s| s.instance).collect();
            assert_eq!(ids, (0..5).collect());
        }
        assert_eq!(make_synthetic(&config).unwrap().to_bnds(), d.to_bnds());
    }
}
