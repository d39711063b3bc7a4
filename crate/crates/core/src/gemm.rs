//! Reference executors for the two hybrid-precision GEMM paths.
//!
//! Every multiply-accumulate is done on integer codes in 64-bit accumulators;
//! floating point only enters when a finished integer dot product is
//! multiplied by its group scales.

use crate::error::{Result, SqError};
use crate::format::{Granularity, QuantizedUniformMatrix, SqWeightMatrix};
use crate::matrix::Matrix;
use crate::quantizers::{ActivationSplit, SplitLayout};

/// Largest reduction length accepted by the integer paths.
pub const MAX_REDUCTION_DIM: usize = 1 << 24;

/// Multiply-accumulate counts per path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PathStats {
    pub high_macs: u64,
    pub low_macs: u64,
}

impl PathStats {
    pub fn total(&self) -> u64 {
        self.high_macs + self.low_macs
    }

    pub fn low_fraction(&self) -> f64 {
        self.low_macs as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GemmResult {
    pub y: Matrix,
    pub path_stats: PathStats,
}

fn check_reduction(k: usize) -> Result<()> {
    if k > MAX_REDUCTION_DIM {
        return Err(SqError::param(format!(
            "reduction length {k} exceeds the exact-accumulation limit {MAX_REDUCTION_DIM}"
        )));
    }
    Ok(())
}

/// `A_q · W_sq` with per-row quantized activations and SQ-format weights.
///
/// The low path runs a dense dot product over the low grid with sentinels
/// read as zero; the high path gathers the activations at the sentinel
/// positions and multiplies them with the compact high codes.
pub fn gemm_sq_weights(a_q: &QuantizedUniformMatrix, w: &SqWeightMatrix) -> Result<GemmResult> {
    if a_q.granularity() != Granularity::PerRow {
        return Err(SqError::structure("activation operand must be quantized per row"));
    }
    if a_q.cols() != w.k() {
        return Err(SqError::structure(format!(
            "activation has {} columns, weight has K = {}",
            a_q.cols(),
            w.k()
        )));
    }
    check_reduction(w.k())?;
    let (m, n) = (a_q.rows(), w.n());
    let b = w.banking().bank_size();
    let banks = w.bank_count();
    let sentinel = w.sentinel();
    let scales = w.scales();

    let mut y = Matrix::zeros(m, n);
    let mut dot_low = vec![0i64; n];
    let mut dot_high = vec![0i64; n];
    let mut slot = vec![0usize; n];
    for r in 0..m {
        let a_scale = f64::from(a_q.scales()[r]);
        let a_row = &a_q.codes()[r * w.k()..(r + 1) * w.k()];
        let out = y.row_mut(r);
        for bank in 0..banks {
            dot_low.fill(0);
            dot_high.fill(0);
            slot.fill(0);
            for row in bank * b..(bank + 1) * b {
                let a = i64::from(a_row[row]);
                let low = &w.low_codes()[row * n..(row + 1) * n];
                for col in 0..n {
                    let c = low[col];
                    if c == sentinel {
                        dot_high[col] += a * i64::from(w.high_code(bank, slot[col], col));
                        slot[col] += 1;
                    } else {
                        dot_low[col] += a * i64::from(c);
                    }
                }
            }
            for col in 0..n {
                let group = f64::from(scales.low(bank, col)) * dot_low[col] as f64
                    + f64::from(scales.high(bank, col)) * dot_high[col] as f64;
                out[col] += a_scale * group;
            }
        }
    }
    let per_row_col = (m * n) as u64;
    let n_high = (banks * w.banking().n_high()) as u64;
    let n_low = (banks * w.banking().n_low()) as u64;
    Ok(GemmResult {
        y,
        path_stats: PathStats {
            high_macs: per_row_col * n_high,
            low_macs: per_row_col * n_low,
        },
    })
}

/// `A_split · W_q` where the activation was split by a static plan (weight
/// rows reordered by the same plan) or dynamically (weight in original order).
pub fn gemm_sq_activations(split: &ActivationSplit, w_q: &QuantizedUniformMatrix) -> Result<GemmResult> {
    if w_q.rows() != split.k() {
        return Err(SqError::structure(format!(
            "weight has {} rows, activations have {} channels",
            w_q.rows(),
            split.k()
        )));
    }
    match (split.layout(), w_q.row_perm()) {
        (SplitLayout::Static { perm }, Some(wp)) if perm.as_slice() == wp => {}
        (SplitLayout::Dynamic { .. }, None) => {}
        (SplitLayout::Static { .. }, _) => {
            return Err(SqError::structure(
                "weight rows are not reordered by the activation plan's permutation",
            ))
        }
        (SplitLayout::Dynamic { .. }, Some(_)) => {
            return Err(SqError::structure(
                "dynamic split expects weights in original channel order",
            ))
        }
    }
    check_reduction(split.k())?;
    let (m, n) = (split.rows(), w_q.cols());
    let run = w_q.row_run();
    let mut y = Matrix::zeros(m, n);
    let mut acc = vec![0i64; n];
    for r in 0..m {
        let out = y.row_mut(r);
        for (codes, index, a_scale) in [split.high_row(r), split.low_row(r)] {
            if codes.is_empty() {
                continue;
            }
            let a_scale = f64::from(a_scale);
            let mut group_row = index[0] as usize;
            acc.fill(0);
            for (&a, &idx) in codes.iter().zip(index) {
                let idx = idx as usize;
                if idx / run != group_row / run {
                    flush(out, &mut acc, w_q, group_row, a_scale);
                    group_row = idx;
                }
                let a = i64::from(a);
                let w_row = &w_q.codes()[idx * n..(idx + 1) * n];
                for (s, &wc) in acc.iter_mut().zip(w_row) {
                    *s += a * i64::from(wc);
                }
            }
            flush(out, &mut acc, w_q, group_row, a_scale);
        }
    }
    let per_row_col = (m * n) as u64;
    Ok(GemmResult {
        y,
        path_stats: PathStats {
            high_macs: per_row_col * split.high_width() as u64,
            low_macs: per_row_col * split.low_width() as u64,
        },
    })
}

fn flush(out: &mut [f64], acc: &mut [i64], w_q: &QuantizedUniformMatrix, row: usize, a_scale: f64) {
    for (col, (o, s)) in out.iter_mut().zip(acc.iter_mut()).enumerate() {
        if *s != 0 {
            *o += a_scale * (f64::from(w_q.scale(row, col)) * *s as f64);
        }
        *s = 0;
    }
}

/// Plain dense 64-bit product, the validation oracle for both hybrid paths.
pub fn gemm_oracle(a: &Matrix, w: &Matrix) -> Result<Matrix> {
    if a.cols() != w.rows() {
        return Err(SqError::structure(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(Matrix::from_fn(a.rows(), w.cols(), |r, c| {
        (0..a.cols()).map(|k| a.get(r, k) * w.get(k, c)).sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{
        decode_weight, encode_weight, quantize_uniform, BankConfig, PrecisionPair,
    };
    use crate::matrix::Mask;
    use crate::quantizers::{
        build_activation_plan, quantize_activations_dynamic, quantize_activations_static,
        quantize_weights_for_plan, ChannelImportance,
    };

    #[test]
    fn two_by_one_weight_example() {
        let w = Matrix::from_vec(2, 1, vec![7.0, 100.0]).unwrap();
        let mask = Mask::from_vec(2, 1, vec![false, true]).unwrap();
        let sq = encode_weight(
            &w,
            &mask,
            BankConfig::new(2, 0.5).unwrap(),
            PrecisionPair::new(8, 4).unwrap(),
        )
        .unwrap();
        let a = quantize_uniform(&Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), 8, Granularity::PerRow)
            .unwrap();
        let res = gemm_sq_weights(&a, &sq).unwrap();
        let oracle = gemm_oracle(&a.dequantize(), &decode_weight(&sq).unwrap()).unwrap();
        let y = res.y.get(0, 0);
        assert!((y - 107.0).abs() / 107.0 <= 1e-5, "{y}");
        assert!((y - oracle.get(0, 0)).abs() / oracle.get(0, 0).abs() <= 1e-5);
        assert_eq!(res.path_stats, PathStats { high_macs: 1, low_macs: 1 });
    }

    #[test]
    fn oracle_identity_and_scalar() {
        let a = Matrix::from_fn(3, 4, |r, c| (r as f64) - (c as f64) * 0.5);
        assert_eq!(gemm_oracle(&a, &Matrix::identity(4)).unwrap(), a);
        let one = gemm_oracle(
            &Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
            &Matrix::from_vec(1, 1, vec![-2.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(one.get(0, 0), -7.5);
        assert!(gemm_oracle(&a, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn weight_gemm_requires_per_row_activations() {
        let w = Matrix::zeros(4, 2);
        let mut mask = Mask::new(4, 2);
        for c in 0..2 {
            mask.set(0, c, true);
            mask.set(2, c, true);
        }
        let sq = encode_weight(
            &w,
            &mask,
            BankConfig::new(2, 0.5).unwrap(),
            PrecisionPair::new(8, 4).unwrap(),
        )
        .unwrap();
        let a = quantize_uniform(&Matrix::zeros(2, 4), 8, Granularity::PerTensor).unwrap();
        assert!(gemm_sq_weights(&a, &sq).is_err());
        let a = quantize_uniform(&Matrix::zeros(2, 6), 8, Granularity::PerRow).unwrap();
        assert!(gemm_sq_weights(&a, &sq).is_err());
    }

    #[test]
    fn activation_gemm_detects_permutation_mismatch() {
        let bc = BankConfig::new(4, 0.5).unwrap();
        let pp = PrecisionPair::new(8, 4).unwrap();
        let imp = ChannelImportance::new(vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let plan = build_activation_plan(&imp, bc, pp).unwrap();
        let a = Matrix::from_fn(2, 4, |r, c| (r + c) as f64 - 1.5);
        let w = Matrix::from_fn(4, 3, |r, c| (r * c) as f64 * 0.25 - 0.5);
        let split = quantize_activations_static(&a, &plan).unwrap();
        let unpermuted = quantize_uniform(&w, 4, Granularity::PerBankColumn { bank_size: 4 }).unwrap();
        assert!(gemm_sq_activations(&split, &unpermuted).is_err());

        let permuted = quantize_weights_for_plan(&w, &plan, 4).unwrap();
        assert!(gemm_sq_activations(&split, &permuted).is_ok());
        let dynamic = quantize_activations_dynamic(&a, bc, pp).unwrap();
        assert!(gemm_sq_activations(&dynamic, &permuted).is_err());
        assert!(gemm_sq_activations(&dynamic, &unpermuted).is_ok());
    }
}
