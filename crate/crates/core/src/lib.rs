//! On-device continual learning primitives for binary neural networks.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only arithmetic:
//!
//! * [`fixedpoint`]: symmetric q-bit quantization, 32-bit fixed-point
//!   requantization multipliers and the quantized linear layer.
//! * [`bitcore`]: bit-packed ±1 tensors with XNOR/popcount dot products and
//!   the clipped straight-through estimator.
//! * [`backbone`]: a small trainable stack of binary blocks that produces the
//!   feature vector consumed by the head.
//! * [`cwr`]: the CWR* output head with dual-precision (forward/update)
//!   weights, consolidation and gradient-error instrumentation.
//!
//! File formats, datasets and the experiment driver live in the `bnncl`
//! companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod bitcore;
pub mod cwr;
mod error;
pub mod fixedpoint;

pub use error::Error;
