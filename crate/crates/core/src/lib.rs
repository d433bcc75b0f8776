//! Polarizing, quantizing front end for l∞-robust image classification.
//!
//! The pipeline is `x → l1-normalized conv filters → ternary quantizer →
//! small CNN`. Filters are trained with bump penalties that push normalized
//! activations away from the quantizer thresholds, so bounded input
//! perturbations cannot change the quantized output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontend;
mod gemm;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
