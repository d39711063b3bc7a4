use crate::calibration::{hessian_inverse_diag, smooth, CalibStats, SmoothResult};
use crate::error::{Result, SqError};
use crate::format::{encode_weight, BankConfig, PrecisionPair, SqConfig, SqWeightMatrix};
use crate::matrix::{Mask, Matrix};

use super::top_k_flags;

/// Per-element saliency of a `K × N` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightImportance(Matrix);

impl WeightImportance {
    pub fn new(scores: Matrix) -> Result<Self> {
        if scores.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SqError::param("importance scores must be finite and non-negative"));
        }
        Ok(Self(scores))
    }

    pub fn scores(&self) -> &Matrix {
        &self.0
    }
}

/// `I[j][i] = W′[j][i]² / hinv_diag[j]²`; the Hessian index runs over input channels.
pub fn weight_importance(w_smoothed: &Matrix, hinv_diag: &[f64]) -> Result<WeightImportance> {
    if hinv_diag.len() != w_smoothed.rows() {
        return Err(SqError::structure(format!(
            "{} inverse-Hessian entries for {} input channels",
            hinv_diag.len(),
            w_smoothed.rows()
        )));
    }
    if let Some(j) = hinv_diag.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(SqError::param(format!(
            "inverse-Hessian diagonal entry {j} is {}, must be positive",
            hinv_diag[j]
        )));
    }
    let scores = Matrix::from_fn(w_smoothed.rows(), w_smoothed.cols(), |j, i| {
        let w = w_smoothed.get(j, i);
        (w * w) / (hinv_diag[j] * hinv_diag[j])
    });
    WeightImportance::new(scores)
}

/// `|W|` as importance; used for magnitude pruning and the 2:4 special case.
pub fn magnitude_importance(w: &Matrix) -> Result<WeightImportance> {
    WeightImportance::new(Matrix::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c).abs()))
}

/// Top-`n_high` entries by importance in every (bank, column) group.
pub fn select_weight_mask(importance: &WeightImportance, banking: BankConfig) -> Result<Mask> {
    let scores = importance.scores();
    let (k, n) = (scores.rows(), scores.cols());
    let banks = banking.bank_count(k)?;
    let b = banking.bank_size();
    let mut mask = Mask::new(k, n);
    let mut group = vec![0.0; b];
    let mut flags = vec![false; b];
    for bank in 0..banks {
        for col in 0..n {
            for (i, g) in group.iter_mut().enumerate() {
                *g = scores.get(bank * b + i, col);
            }
            top_k_flags(&group, banking.n_high(), &mut flags);
            for (i, &f) in flags.iter().enumerate() {
                if f {
                    mask.set(bank * b + i, col, true);
                }
            }
        }
    }
    Ok(mask)
}

/// A weight matrix after smoothing, with the inverse-Hessian diagonal ready.
///
/// Holding this lets many SQ configurations be evaluated against one
/// calibration pass.
#[derive(Debug, Clone)]
pub struct PreparedWeights {
    pub smooth: SmoothResult,
    pub hinv_diag: Vec<f64>,
}

impl PreparedWeights {
    pub fn new(w: &Matrix, stats: &CalibStats, alpha: f64, damping: f64) -> Result<Self> {
        if stats.n_samples() == 0 {
            return Err(SqError::param("calibration statistics are empty"));
        }
        let smooth = smooth(w, stats, alpha)?;
        let hinv_diag = hessian_inverse_diag(stats.hessian(), damping)?;
        Ok(Self { smooth, hinv_diag })
    }

    pub fn importance(&self) -> Result<WeightImportance> {
        weight_importance(&self.smooth.w_smoothed, &self.hinv_diag)
    }

    pub fn quantize(&self, config: SqConfig) -> Result<SqWeightMatrix> {
        let mask = select_weight_mask(&self.importance()?, config.banking)?;
        encode_weight(&self.smooth.w_smoothed, &mask, config.banking, config.precision)
    }
}

/// Smooth → inverse-Hessian diagonal → importance → mask → encode.
///
/// Returns the encoded smoothed weight together with the smoothing record
/// (activations must be divided by its channel scales at inference).
pub fn quantize_weights_sq(
    w: &Matrix,
    stats: &CalibStats,
    config: SqConfig,
    alpha: f64,
    damping: f64,
) -> Result<(SqWeightMatrix, SmoothResult)> {
    let prepared = PreparedWeights::new(w, stats, alpha, damping)?;
    let sq = prepared.quantize(config)?;
    Ok((sq, prepared.smooth))
}

/// 2:4 semi-structured sparsity: SQ with `b = 4`, `s = 0.5`, `h_low = 0`,
/// keeping the two largest-magnitude values of every group of four.
pub fn sparse_2_4(w: &Matrix, high_bits: u8) -> Result<SqWeightMatrix> {
    let banking = BankConfig::new(4, 0.5)?;
    let precision = PrecisionPair::new(high_bits, 0)?;
    let mask = select_weight_mask(&magnitude_importance(w)?, banking)?;
    encode_weight(w, &mask, banking, precision)
}
