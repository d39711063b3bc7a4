//! Hybrid-precision sparse-quantized (SQ) tensors.
//!
//! The crate covers the SQ weight format and its encode/decode, calibration
//! and smoothing, the Hessian-guided weight quantizer, static and dynamic
//! activation splitting, a bit-exact integer reference GEMM for both paths,
//! an analytical throughput model and a sweep harness over synthetic layers.

pub mod calibration;
pub mod error;
pub mod format;
pub mod gemm;
pub mod harness;
pub mod matrix;
pub mod perfmodel;
pub mod quantizers;

pub use error::{Result, SqError};
pub use format::{BankConfig, PrecisionPair, SqConfig, SqWeightMatrix};
pub use matrix::{Mask, Matrix};
