//! The continual-learning outer loop.
//!
//! Experience 1 trains the backbone jointly with a floating-point head,
//! then freezes the backbone. Every later experience registers its new
//! classes, preloads the temporary head weights at the configured
//! precisions, trains only the head, consolidates and evaluates the
//! consolidated weights on the fixed test split.

use std::collections::BTreeMap;

use bnncl_core::backbone::BackboneModel;
use bnncl_core::cwr::{CwrState, QuantConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::metrics::{MetricRow, MetricsSink, RunMetrics};
use crate::scenario::{build_scenario, Experience, Scenario, Split};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub experiences: usize,
    pub quant: QuantConfig,
    /// Step size for the backbone during experience 1.
    pub backbone_lr: f64,
    pub epochs_first: usize,
    pub epochs_rest: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Backbone layer widths after the input layer.
    pub hidden: Vec<usize>,
    pub test_fraction: f64,
    pub mae_instrumentation: bool,
}

impl RunConfig {
    pub fn new(scenario: Scenario, quant: QuantConfig) -> Self {
        RunConfig {
            scenario,
            experiences: scenario.default_experiences(),
            quant,
            backbone_lr: 0.01,
            epochs_first: 10,
            epochs_rest: 5,
            batch_size: 32,
            seed: 0,
            hidden: vec![256, 128],
            test_fraction: 0.2,
            mae_instrumentation: false,
        }
    }
}

/// Where the backbone (and possibly the head) comes from.
#[derive(Debug, Clone)]
pub enum Start {
    /// Random backbone from the run seed.
    Scratch,
    /// Given backbone. A frozen one is not trained; experience 1 then
    /// trains the head alone.
    Backbone(BackboneModel),
    /// State right after experience 1, e.g. from `pretrain`. Experience 1
    /// is evaluated but not retrained.
    Resume { backbone: BackboneModel, head: CwrState },
}

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub backbone: BackboneModel,
    pub state: CwrState,
    pub split: Split,
}

#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: HarnessError,
    /// Rows recorded before the failure, with `partial` set.
    pub metrics: RunMetrics,
}

/// Mini-batch visiting order for one epoch of one experience.
pub fn minibatch_order(seed: u64, experience: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 40) | ((experience as u64) << 20) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn backbone_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn run_experiment(
    dataset: &Dataset,
    config: &RunConfig,
    start: Start,
    sink: &mut dyn MetricsSink,
) -> Result<RunOutcome, RunFailure> {
    run_stream(dataset, config, start, sink, None)
}

/// Experience 1 only. The returned head is consolidated.
pub fn pretrain(dataset: &Dataset, config: &RunConfig, sink: &mut dyn MetricsSink) -> Result<RunOutcome, RunFailure> {
    run_stream(dataset, config, Start::Scratch, sink, Some(1))
}

fn run_stream(
    dataset: &Dataset,
    config: &RunConfig,
    start: Start,
    sink: &mut dyn MetricsSink,
    limit: Option<usize>,
) -> Result<RunOutcome, RunFailure> {
    let mut metrics = RunMetrics::default();
    match Runner::new(dataset, config, &mut metrics, sink).and_then(|r| r.run(start, limit)) {
        Ok((backbone, state, split)) => Ok(RunOutcome { metrics, backbone, state, split }),
        Err(error) => {
            metrics.partial = true;
            Err(RunFailure { error, metrics })
        }
    }
}

struct Runner<'a> {
    dataset: &'a Dataset,
    config: &'a RunConfig,
    metrics: &'a mut RunMetrics,
    sink: &'a mut dyn MetricsSink,
    inputs: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

impl<'a> Runner<'a> {
    fn new(
        dataset: &'a Dataset,
        config: &'a RunConfig,
        metrics: &'a mut RunMetrics,
        sink: &'a mut dyn MetricsSink,
    ) -> Result<Self, HarnessError> {
        if config.batch_size == 0 {
            return Err(HarnessError::Config("batch size must be positive".into()));
        }
        if !(config.backbone_lr > 0.0) {
            return Err(HarnessError::Config("backbone learning rate must be positive".into()));
        }
        let inputs = dataset.samples().iter().map(|s| s.features.iter().map(|&f| f as f64).collect()).collect();
        let labels = dataset.samples().iter().map(|s| s.class as u32).collect();
        Ok(Runner { dataset, config, metrics, sink, inputs, labels })
    }

    fn batches(&self, exp: &Experience, epoch: usize) -> Vec<Vec<usize>> {
        minibatch_order(self.config.seed, exp.index, epoch, exp.samples.len())
            .chunks(self.config.batch_size)
            .map(|c| c.iter().map(|&k| exp.samples[k]).collect())
            .collect()
    }

    fn run(self, start: Start, limit: Option<usize>) -> Result<(BackboneModel, CwrState, Split), HarnessError> {
        let c = self.config;
        let split = build_scenario(self.dataset, c.scenario, c.experiences, c.test_fraction, c.seed)?;
        if split.test.is_empty() {
            return Err(HarnessError::Config("test split is empty".into()));
        }
        let (mut backbone, resumed) = match start {
            Start::Scratch => {
                let mut dims = vec![self.dataset.input_dim()];
                dims.extend_from_slice(&c.hidden);
                (BackboneModel::random(&dims, &mut backbone_rng(c.seed))?, None)
            }
            Start::Backbone(b) => (b, None),
            Start::Resume { backbone, head } => {
                if !backbone.is_frozen() {
                    return Err(HarnessError::Config("resuming needs a frozen backbone".into()));
                }
                (backbone, Some(head))
            }
        };
        if backbone.input_dim() != self.dataset.input_dim() {
            return Err(HarnessError::Config(format!(
                "backbone takes {} inputs, dataset has {}",
                backbone.input_dim(),
                self.dataset.input_dim()
            )));
        }

        let runner = self;
        let mut features: Vec<Vec<f64>> = Vec::new();
        let mut state = CwrState::new(backbone.feature_dim(), c.quant);
        let last = limit.unwrap_or(usize::MAX).min(split.experiences.len());
        for exp in &split.experiences[..last] {
            let classes: Vec<u32> = exp.class_set.iter().copied().collect();
            let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
            for &i in &exp.samples {
                *counts.entry(runner.labels[i]).or_default() += 1;
            }
            let mut mae = None;
            if exp.index == 0 {
                if let Some(head) = &resumed {
                    if head.classes() != classes.as_slice() {
                        return Err(HarnessError::Config("checkpoint head classes differ from experience 1".into()));
                    }
                    state = CwrState::from_consolidated(
                        head.feature_dim(),
                        c.quant,
                        head.classes().to_vec(),
                        head.cw().to_vec(),
                        head.cw_bias().to_vec(),
                        head.past().to_vec(),
                    )?;
                    features = runner.features(&backbone)?;
                } else {
                    state.expand_head(&classes);
                    state.preload_tw_float(&classes)?;
                    if backbone.is_frozen() {
                        features = runner.features(&backbone)?;
                        runner.train_head(&mut state, exp, &features, c.epochs_first, false)?;
                    } else {
                        for epoch in 0..c.epochs_first {
                            for batch in runner.batches(exp, epoch) {
                                let pairs: Vec<(&[f64], u32)> =
                                    batch.iter().map(|&i| (runner.inputs[i].as_slice(), runner.labels[i])).collect();
                                backbone.train_backbone_step(&pairs, &mut state, c.backbone_lr)?;
                            }
                        }
                        backbone.freeze();
                        features = runner.features(&backbone)?;
                    }
                    state.consolidate(&counts)?;
                }
            } else {
                state.expand_head(&classes);
                state.preload_tw(&classes)?;
                mae = runner.train_head(&mut state, exp, &features, c.epochs_rest, c.mae_instrumentation)?;
                state.consolidate(&counts)?;
            }
            let accuracy = runner.accuracy(&state, &features, &split.test)?;
            let row = MetricRow {
                experience: exp.index + 1,
                accuracy,
                mae_percent: mae,
                scenario: c.scenario,
                lp_bits: c.quant.lp().to_string(),
                hp_bits: c.quant.hp().to_string(),
                seed: c.seed,
            };
            log::info!("experience {}: accuracy {:.2}%", row.experience, accuracy);
            runner.sink.record(&row)?;
            runner.metrics.rows.push(row);
        }
        Ok((backbone, state, split))
    }

    fn features(&self, backbone: &BackboneModel) -> Result<Vec<Vec<f64>>, HarnessError> {
        Ok(self.inputs.iter().map(|x| backbone.forward_features(x)).collect::<Result<_, _>>()?)
    }

    /// Head-only epochs. Returns the summed MAE% when instrumented.
    fn train_head(
        &self,
        state: &mut CwrState,
        exp: &Experience,
        features: &[Vec<f64>],
        epochs: usize,
        instrument: bool,
    ) -> Result<Option<f64>, HarnessError> {
        let mut total = 0.0;
        for epoch in 0..epochs {
            for batch in self.batches(exp, epoch) {
                let feats: Vec<Vec<f64>> = batch.iter().map(|&i| features[i].clone()).collect();
                let labels: Vec<u32> = batch.iter().map(|&i| self.labels[i]).collect();
                let report = state.train_minibatch(&feats, &labels, instrument)?;
                total += report.mae_percent.unwrap_or(0.0);
            }
        }
        Ok(instrument.then_some(total))
    }

    fn accuracy(&self, state: &CwrState, features: &[Vec<f64>], test: &[usize]) -> Result<f64, HarnessError> {
        let eval = state.evaluator()?;
        let mut correct = 0usize;
        for &i in test {
            correct += (eval.predict(&features[i])? == self.labels[i]) as usize;
        }
        Ok(100.0 * correct as f64 / test.len() as f64)
    }
}
