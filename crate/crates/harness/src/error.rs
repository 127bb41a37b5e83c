use std::io;

use crate::checkpoint::CheckpointError;
use crate::dataset::DatasetError;
use crate::scenario::ScenarioError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Core(#[from] bnncl_core::Error),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("{0}")]
    Config(String),
}

impl HarnessError {
    /// Short tag printed in front of CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Io(_) => "io",
            HarnessError::Dataset(_) => "dataset",
            HarnessError::Checkpoint(_) => "checkpoint",
            HarnessError::Scenario(_) => "scenario",
            HarnessError::Core(_) => "numeric",
            HarnessError::Metrics(_) => "metrics",
            HarnessError::Config(_) => "config",
        }
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Metrics(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Metrics(e.to_string())
    }
}

macro_rules! core_error {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Core(e.into())
            }
        }
    )*};
}

core_error!(
    bnncl_core::fixedpoint::QuantError,
    bnncl_core::backbone::BackboneError,
    bnncl_core::cwr::CwrError
);
