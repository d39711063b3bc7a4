//! Calibration statistics, Hessian accumulation and per-channel smoothing.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Result, SqError};
use crate::matrix::Matrix;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_DAMPING: f64 = 0.01;

/// Per-channel activation statistics and the un-normalized Hessian `XᵀX`
/// gathered over a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    k: usize,
    n_samples: u64,
    amax: Vec<f64>,
    channel_sum: Vec<f64>,
    hessian: Matrix,
}

impl CalibStats {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            n_samples: 0,
            amax: vec![0.0; k],
            channel_sum: vec![0.0; k],
            hessian: Matrix::zeros(k, k),
        }
    }

    /// Rebuilds statistics from stored parts (container load path).
    pub fn from_parts(
        n_samples: u64,
        amax: Vec<f64>,
        channel_sum: Vec<f64>,
        hessian: Matrix,
    ) -> Result<Self> {
        let k = amax.len();
        if channel_sum.len() != k || hessian.rows() != k || hessian.cols() != k {
            return Err(SqError::structure("calibration statistics have inconsistent sizes"));
        }
        if amax.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(SqError::structure("channel maxima must be finite and non-negative"));
        }
        Ok(Self {
            k,
            n_samples,
            amax,
            channel_sum,
            hessian,
        })
    }

    /// Convenience constructor: statistics of a single batch.
    pub fn from_batch(batch: &Matrix) -> Result<Self> {
        let mut stats = Self::new(batch.cols());
        stats.accumulate(batch)?;
        Ok(stats)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn amax(&self) -> &[f64] {
        &self.amax
    }

    pub fn channel_sum(&self) -> &[f64] {
        &self.channel_sum
    }

    /// Signed per-channel mean activation.
    pub fn abar(&self) -> Vec<f64> {
        if self.n_samples == 0 {
            return vec![0.0; self.k];
        }
        let n = self.n_samples as f64;
        self.channel_sum.iter().map(|s| s / n).collect()
    }

    pub fn hessian(&self) -> &Matrix {
        &self.hessian
    }

    /// Folds an `M × K` batch into the statistics.
    ///
    /// The Hessian is updated one row at a time in batch order, so the result
    /// is bitwise equal to `XᵀX` of the concatenated rows summed in order.
    pub fn accumulate(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.k {
            return Err(SqError::structure(format!(
                "batch has {} channels, statistics track {}",
                batch.cols(),
                self.k
            )));
        }
        batch.ensure_finite("calibration batch")?;
        for r in 0..batch.rows() {
            for ((m, s), &a) in self.amax.iter_mut().zip(&mut self.channel_sum).zip(batch.row(r)) {
                *m = m.max(a.abs());
                *s += a;
            }
        }
        let k = self.k;
        let h = self.hessian.as_mut_slice();
        h.par_chunks_mut(k.max(1)).enumerate().for_each(|(i, h_row)| {
            for r in 0..batch.rows() {
                let x = batch.row(r);
                let xi = x[i];
                for (h, &xj) in h_row.iter_mut().zip(x) {
                    *h += xi * xj;
                }
            }
        });
        self.n_samples += batch.rows() as u64;
        Ok(())
    }

    /// Combines statistics gathered independently over disjoint batches.
    pub fn merge(&mut self, other: &CalibStats) -> Result<()> {
        if other.k != self.k {
            return Err(SqError::structure("cannot merge statistics of different widths"));
        }
        for (a, b) in self.amax.iter_mut().zip(&other.amax) {
            *a = a.max(*b);
        }
        for (a, b) in self.channel_sum.iter_mut().zip(&other.channel_sum) {
            *a += b;
        }
        let h = self.hessian.as_mut_slice();
        for (a, b) in h.iter_mut().zip(other.hessian.as_slice()) {
            *a += b;
        }
        self.n_samples += other.n_samples;
        Ok(())
    }
}

/// Smoothed weights plus the per-channel factors that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothResult {
    pub w_smoothed: Matrix,
    pub channel_scale: Vec<f64>,
    pub alpha: f64,
}

impl SmoothResult {
    /// Divides activation channel `j` by `channel_scale[j]`.
    pub fn smooth_activations(&self, a: &Matrix) -> Result<Matrix> {
        a.div_columns(&self.channel_scale)
    }

    /// Smoothed per-channel mean activation `Ā_j / c_j`.
    pub fn smooth_abar(&self, abar: &[f64]) -> Vec<f64> {
        abar.iter().zip(&self.channel_scale).map(|(a, c)| a / c).collect()
    }
}

/// Migrates activation outliers into the weight rows.
///
/// `c_j = amax_j^α / wmax_j^(1−α)` with zero bases replaced by 1; weight row
/// `j` is multiplied by `c_j` and activation channel `j` must be divided by it.
pub fn smooth(w: &Matrix, stats: &CalibStats, alpha: f64) -> Result<SmoothResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SqError::param(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if stats.k != w.rows() {
        return Err(SqError::structure(format!(
            "weight has {} input channels, statistics cover {}",
            w.rows(),
            stats.k
        )));
    }
    w.ensure_finite("weight")?;
    let wmax = w.row_abs_max();
    let nonzero = |v: f64| if v == 0.0 { 1.0 } else { v };
    let channel_scale: Vec<f64> = stats
        .amax
        .iter()
        .zip(&wmax)
        .map(|(&a, &wm)| nonzero(a).powf(alpha) / nonzero(wm).powf(1.0 - alpha))
        .collect();
    if let Some(j) = channel_scale.iter().position(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(SqError::Numerical(format!(
            "smoothing factor of channel {j} is {}",
            channel_scale[j]
        )));
    }
    let mut w_smoothed = w.clone();
    for (j, &c) in channel_scale.iter().enumerate() {
        for v in w_smoothed.row_mut(j) {
            *v *= c;
        }
    }
    Ok(SmoothResult {
        w_smoothed,
        channel_scale,
        alpha,
    })
}

/// Diagonal of `(H + λI)⁻¹` with `λ = damping_frac · mean(diag H)`.
pub fn hessian_inverse_diag(h: &Matrix, damping_frac: f64) -> Result<Vec<f64>> {
    if !(damping_frac > 0.0) || !damping_frac.is_finite() {
        return Err(SqError::param(format!(
            "damping fraction must be positive, got {damping_frac}"
        )));
    }
    let k = h.rows();
    if h.cols() != k {
        return Err(SqError::structure(format!("Hessian is {}x{}, not square", k, h.cols())));
    }
    h.ensure_finite("Hessian")?;
    let diag_mean = if k == 0 {
        0.0
    } else {
        (0..k).map(|i| h.get(i, i)).sum::<f64>() / k as f64
    };
    let lambda = if diag_mean == 0.0 {
        damping_frac
    } else {
        damping_frac * diag_mean
    };
    let mut damped = DMatrix::from_row_slice(k, k, h.as_slice());
    for i in 0..k {
        damped[(i, i)] += lambda;
    }
    let chol = damped.cholesky().ok_or_else(|| {
        SqError::Numerical("Hessian is not positive definite even after damping".into())
    })?;
    let inv = chol.inverse();
    let diag: Vec<f64> = (0..k).map(|i| inv[(i, i)]).collect();
    if let Some(i) = diag.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(SqError::Numerical(format!(
            "inverse Hessian diagonal entry {i} is {}",
            diag[i]
        )));
    }
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row_accumulation() {
        let mut s = CalibStats::new(2);
        s.accumulate(&Matrix::from_rows(&[vec![1.0, -3.0]]).unwrap()).unwrap();
        assert_eq!(s.amax(), &[1.0, 3.0]);
        assert_eq!(s.abar(), vec![1.0, -3.0]);
        assert_eq!(s.hessian().as_slice(), &[1.0, -3.0, -3.0, 9.0]);
        assert_eq!(s.n_samples(), 1);
    }

    #[test]
    fn identical_batches_double_the_hessian() {
        let batch = Matrix::from_rows(&[vec![0.5, 2.0, -1.0], vec![1.5, -0.25, 3.0]]).unwrap();
        let once = CalibStats::from_batch(&batch).unwrap();
        let mut twice = once.clone();
        twice.accumulate(&batch).unwrap();
        assert_eq!(twice.abar(), once.abar());
        assert_eq!(twice.amax(), once.amax());
        assert_eq!(twice.hessian(), &once.hessian().scale(2.0));
    }

    #[test]
    fn zero_batch_shrinks_mean_only() {
        let mut s = CalibStats::from_batch(&Matrix::from_rows(&[vec![2.0, -4.0]]).unwrap()).unwrap();
        let h = s.hessian().clone();
        s.accumulate(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(s.amax(), &[2.0, 4.0]);
        assert_eq!(s.abar(), vec![0.5, -1.0]);
        assert_eq!(s.hessian(), &h);
    }

    #[test]
    fn merge_equals_sequential() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let b = Matrix::from_rows(&[vec![4.0, -1.0]]).unwrap();
        let mut seq = CalibStats::from_batch(&a).unwrap();
        seq.accumulate(&b).unwrap();
        let mut merged = CalibStats::from_batch(&a).unwrap();
        merged.merge(&CalibStats::from_batch(&b).unwrap()).unwrap();
        assert_eq!(merged, seq);
    }

    #[test]
    fn dimension_mismatch() {
        let mut s = CalibStats::new(3);
        assert!(matches!(s.accumulate(&Matrix::zeros(1, 2)), Err(SqError::Structure(_))));
    }

    #[test]
    fn smoothing_endpoints() {
        let w = Matrix::from_rows(&[vec![2.0, -1.0], vec![0.5, 0.25]]).unwrap();
        let stats = CalibStats::from_batch(&Matrix::from_rows(&[vec![3.0, -8.0]]).unwrap()).unwrap();
        let s0 = smooth(&w, &stats, 0.0).unwrap();
        assert_eq!(s0.channel_scale, vec![0.5, 2.0]);
        let s1 = smooth(&w, &stats, 1.0).unwrap();
        assert_eq!(s1.channel_scale, vec![3.0, 8.0]);
        assert!(smooth(&w, &stats, -0.1).is_err());
        assert!(smooth(&w, &stats, 1.5).is_err());
    }

    #[test]
    fn smoothing_half_alpha_example() {
        let w = Matrix::from_rows(&[vec![1.0, -0.5]]).unwrap();
        let a = Matrix::from_rows(&[vec![4.0], vec![-2.0]]).unwrap();
        let stats = CalibStats::from_batch(&a).unwrap();
        let res = smooth(&w, &stats, 0.5).unwrap();
        assert_eq!(res.channel_scale, vec![2.0]);
        assert_eq!(res.w_smoothed.as_slice(), &[2.0, -1.0]);
        let a_s = res.smooth_activations(&a).unwrap();
        assert_eq!(a_s.as_slice(), &[2.0, -1.0]);
        assert_eq!(a_s.matmul(&res.w_smoothed).unwrap(), a.matmul(&w).unwrap());
    }

    #[test]
    fn zero_bases_are_replaced() {
        let w = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let stats = CalibStats::new(2);
        let res = smooth(&w, &stats, 0.5).unwrap();
        assert_eq!(res.channel_scale[0], 1.0);
        assert!(res.channel_scale.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn inverse_diag_of_identity() {
        let d = hessian_inverse_diag(&Matrix::identity(4), 0.01).unwrap();
        for v in d {
            assert!((v - 1.0 / 1.01).abs() < 1e-15);
        }
    }

    #[test]
    fn inverse_diag_of_diagonal() {
        let diag = [2.0, 4.0, 6.0];
        let h = Matrix::from_fn(3, 3, |r, c| if r == c { diag[r] } else { 0.0 });
        let lambda = 0.1 * 4.0;
        let d = hessian_inverse_diag(&h, 0.1).unwrap();
        for (v, di) in d.iter().zip(diag) {
            assert!((v - 1.0 / (di + lambda)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_hessian_uses_absolute_damping() {
        let d = hessian_inverse_diag(&Matrix::zeros(2, 2), 0.5).unwrap();
        assert!(d.iter().all(|v| (v - 2.0).abs() < 1e-14));
        assert!(hessian_inverse_diag(&Matrix::zeros(2, 2), 0.0).is_err());
        assert!(hessian_inverse_diag(&Matrix::zeros(2, 3), 0.1).is_err());
    }

    #[test]
    fn indefinite_matrix_fails() {
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -5.0]]).unwrap();
        assert!(matches!(hessian_inverse_diag(&h, 0.01), Err(SqError::Numerical(_))));
    }
}
