//! Runs one configuration per head precision, in parallel.

use std::thread;

use bnncl_core::cwr::{Precision, QuantConfig};

use crate::dataset::Dataset;
use crate::experiment::{pretrain, run_experiment, RunConfig, Start};
use crate::metrics::{MetricRow, RunMetrics};
use crate::HarnessError;

/// Experience 1 is trained once and shared: it runs in floating point
/// whatever the head precision, so every grid point starts from the same
/// backbone and consolidated head. Each point uses `lp = hp`.
pub fn run_sweep(dataset: &Dataset, base: &RunConfig, precisions: &[Precision]) -> Result<Vec<RunMetrics>, HarnessError> {
    let lr = base.quant.learning_rate();
    let configs: Vec<RunConfig> = precisions
        .iter()
        .map(|&p| Ok(RunConfig { quant: QuantConfig::uniform(p, lr)?, ..base.clone() }))
        .collect::<Result<_, HarnessError>>()?;
    let mut scratch = Vec::new();
    let first = pretrain(dataset, base, &mut scratch).map_err(|f| f.error)?;
    let (backbone, head) = (first.backbone, first.state);

    thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|config| {
                let start = Start::Resume { backbone: backbone.clone(), head: head.clone() };
                s.spawn(move || {
                    let mut rows: Vec<MetricRow> = Vec::new();
                    run_experiment(dataset, config, start, &mut rows).map(|o| o.metrics).map_err(|f| f.error)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

/// All rows of a sweep in grid order.
pub fn combined_rows(results: &[RunMetrics]) -> Vec<MetricRow> {
    results.iter().flat_map(|m| m.rows.iter().cloned()).collect()
}
