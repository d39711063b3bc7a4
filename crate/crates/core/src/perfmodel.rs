//! Analytical models: equivalent bit-widths, the computation-balance
//! sparsity bound, the static-split speedup model and mask storage.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SqError};
use crate::format::PrecisionPair;

/// Storage-weighted bit-width of an SQ weight: `(1−s)·h_high + h_low`.
///
/// The low grid keeps every position (sentinels included), hence the
/// unweighted `h_low` term.
pub fn equivalent_bits_weight(precision: PrecisionPair, sparsity: f64) -> f64 {
    (1.0 - sparsity) * f64::from(precision.high()) + f64::from(precision.low())
}

/// Compute-weighted bit-width of an SQ activation: `(1−s)·h_high + s·h_low`.
pub fn equivalent_bits_activation(precision: PrecisionPair, sparsity: f64) -> f64 {
    (1.0 - sparsity) * f64::from(precision.high()) + sparsity * f64::from(precision.low())
}

/// Smallest sparsity at which the high path hides behind the low path,
/// when the low path is `rate_ratio` times faster per MAC: `k / (k + 1)`.
pub fn min_hidden_sparsity(rate_ratio: f64) -> Result<f64> {
    if !(rate_ratio > 0.0) || !rate_ratio.is_finite() {
        return Err(SqError::param(format!(
            "rate ratio must be positive, got {rate_ratio}"
        )));
    }
    Ok(rate_ratio / (rate_ratio + 1.0))
}

/// Amdahl-style speedup of a static split over the high-precision baseline.
///
/// `full_low_speedup` is the end-to-end speedup of running everything at low
/// precision; a fraction `s` of the work gets that speedup.
pub fn static_split_speedup(sparsity: f64, full_low_speedup: f64, overhead: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(SqError::param(format!("sparsity must lie in [0, 1], got {sparsity}")));
    }
    if !(full_low_speedup > 0.0) {
        return Err(SqError::param(format!(
            "full low-precision speedup must be positive, got {full_low_speedup}"
        )));
    }
    if !(overhead >= 0.0) {
        return Err(SqError::param(format!("overhead must be non-negative, got {overhead}")));
    }
    let denom = (1.0 - sparsity) + sparsity / full_low_speedup + overhead;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(SqError::Numerical(format!("speedup denominator is {denom}")));
    }
    Ok(1.0 / denom)
}

/// Linear layers of a model as `(input_channels, count)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims(Vec<(usize, usize)>);

impl LayerDims {
    pub fn new(entries: Vec<(usize, usize)>) -> Result<Self> {
        if entries.iter().any(|&(k, c)| k == 0 || c == 0) {
            return Err(SqError::param("layer dimensions must be positive"));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Llama-3-70B: 80 decoder layers, each with q/k/v/o/gate/up projections
    /// reading the 8192-wide hidden state and a down projection reading the
    /// 28672-wide MLP state.
    pub fn llama3_70b() -> Self {
        Self(vec![(8192, 6 * 80), (28672, 80)])
    }

    /// Llama-3-8B: 32 layers, hidden 4096, MLP 14336.
    pub fn llama3_8b() -> Self {
        Self(vec![(4096, 6 * 32), (14336, 32)])
    }
}

/// One mask byte per input channel of every linear layer.
pub fn estimate_mask_storage(dims: &LayerDims) -> u64 {
    dims.0.iter().map(|&(k, count)| (k as u64) * (count as u64)).sum()
}
