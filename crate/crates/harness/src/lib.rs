//! Continual-learning experiment harness around `bnncl-core`.
//!
//! * [`dataset`]: labelled samples, `BNDS` and text formats, synthetic data
//! * [`scenario`]: NC/NI experience streams with a fixed test split
//! * [`experiment`]: the outer training loop
//! * [`metrics`]: per-experience results as CSV or JSON
//! * [`checkpoint`]: `BNCL` files with an optional `CWRS` head section
//! * [`sweep`]: precision grids run in parallel
//! * [`gradcheck`]: runtime self-checks of the numeric kernels

pub mod checkpoint;
pub mod dataset;
mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod scenario;
pub mod sweep;

pub use error::HarnessError;
