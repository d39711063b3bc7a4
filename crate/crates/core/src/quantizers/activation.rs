use crate::calibration::{smooth, CalibStats, SmoothResult};
use crate::error::{Result, SqError};
use crate::format::{
    quantize_group, quantize_uniform, BankConfig, Granularity, PrecisionPair, QuantizedUniformMatrix,
    SqConfig,
};
use crate::matrix::{Mask, Matrix};

use super::top_k_flags;

/// Per-input-channel importance for static activation splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImportance(Vec<f64>);

impl ChannelImportance {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SqError::param("channel importance must be finite and non-negative"));
        }
        Ok(Self(scores))
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }
}

/// `I_j = |Ā_j · Σ_i W′[j][i]|`, the sum running over the output columns of row `j`.
pub fn activation_channel_importance(abar: &[f64], w_smoothed: &Matrix) -> Result<ChannelImportance> {
    if abar.len() != w_smoothed.rows() {
        return Err(SqError::structure(format!(
            "{} channel means for a weight with {} input channels",
            abar.len(),
            w_smoothed.rows()
        )));
    }
    let scores = abar
        .iter()
        .enumerate()
        .map(|(j, a)| (a * w_smoothed.row(j).iter().sum::<f64>()).abs())
        .collect();
    ChannelImportance::new(scores)
}

/// Static per-channel precision mask plus the within-bank reordering that
/// moves every bank's high channels to its leading slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPlan {
    banking: BankConfig,
    precision: PrecisionPair,
    channel_mask: Vec<bool>,
    perm: Vec<usize>,
}

impl ActivationPlan {
    pub fn from_parts(
        banking: BankConfig,
        precision: PrecisionPair,
        channel_mask: Vec<bool>,
        perm: Vec<usize>,
    ) -> Result<Self> {
        let plan = Self {
            banking,
            precision,
            channel_mask,
            perm,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn k(&self) -> usize {
        self.channel_mask.len()
    }

    pub fn banking(&self) -> BankConfig {
        self.banking
    }

    pub fn precision(&self) -> PrecisionPair {
        self.precision
    }

    pub fn channel_mask(&self) -> &[bool] {
        &self.channel_mask
    }

    /// `perm[i]` is the original channel placed at slot `i`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (slot, &ch) in self.perm.iter().enumerate() {
            inv[ch] = slot;
        }
        inv
    }

    /// Checks mask cardinality per bank and that `perm` is a within-bank
    /// bijection placing the masked channels first.
    pub fn validate(&self) -> Result<()> {
        let k = self.channel_mask.len();
        let banks = self.banking.bank_count(k)?;
        if self.perm.len() != k {
            return Err(SqError::structure(format!(
                "permutation has {} entries for {k} channels",
                self.perm.len()
            )));
        }
        let b = self.banking.bank_size();
        let n_high = self.banking.n_high();
        let mut seen = vec![false; k];
        for bank in 0..banks {
            let range = bank * b..(bank + 1) * b;
            let count = self.channel_mask[range.clone()].iter().filter(|&&m| m).count();
            if count != n_high {
                return Err(SqError::structure(format!(
                    "bank {bank} marks {count} high channels, expected {n_high}"
                )));
            }
            for slot in range.clone() {
                let ch = self.perm[slot];
                if !range.contains(&ch) || seen[ch] {
                    return Err(SqError::structure(format!(
                        "permutation entry {slot} -> {ch} is not a within-bank bijection"
                    )));
                }
                seen[ch] = true;
                let leading = slot - bank * b < n_high;
                if self.channel_mask[ch] != leading {
                    return Err(SqError::structure(format!(
                        "slot {slot} of bank {bank} does not match the channel mask"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Top-`n_high` channels per bank by importance; ties go to the lower index.
pub fn build_activation_plan(
    importance: &ChannelImportance,
    banking: BankConfig,
    precision: PrecisionPair,
) -> Result<ActivationPlan> {
    let scores = importance.scores();
    let k = scores.len();
    let banks = banking.bank_count(k)?;
    let b = banking.bank_size();
    let mut channel_mask = vec![false; k];
    let mut perm = Vec::with_capacity(k);
    for bank in 0..banks {
        let range = bank * b..(bank + 1) * b;
        top_k_flags(&scores[range.clone()], banking.n_high(), &mut channel_mask[range.clone()]);
        perm.extend(range.clone().filter(|&c| channel_mask[c]));
        perm.extend(range.filter(|&c| !channel_mask[c]));
    }
    ActivationPlan::from_parts(banking, precision, channel_mask, perm)
}

/// Calibration pipeline for static activation splitting: smooth, score the
/// channels on the smoothed mean activations, then build the plan.
pub fn plan_static_activations(
    w: &Matrix,
    stats: &CalibStats,
    config: SqConfig,
    alpha: f64,
) -> Result<(ActivationPlan, SmoothResult)> {
    if stats.n_samples() == 0 {
        return Err(SqError::param("calibration statistics are empty"));
    }
    let smooth = smooth(w, stats, alpha)?;
    let abar = smooth.smooth_abar(&stats.abar());
    let importance = activation_channel_importance(&abar, &smooth.w_smoothed)?;
    let plan = build_activation_plan(&importance, config.banking, config.precision)?;
    Ok((plan, smooth))
}

/// Reorders the weight rows by the plan's permutation.
pub fn apply_plan_to_weights(w_smoothed: &Matrix, plan: &ActivationPlan) -> Result<Matrix> {
    if w_smoothed.rows() != plan.k() {
        return Err(SqError::structure(format!(
            "plan covers {} channels, weight has {} rows",
            plan.k(),
            w_smoothed.rows()
        )));
    }
    w_smoothed.permute_rows(&plan.perm)
}

/// Reorders the weight by the plan and quantizes it per (bank, column) group.
/// The result is tagged with the plan's permutation for the hybrid GEMM.
pub fn quantize_weights_for_plan(
    w_smoothed: &Matrix,
    plan: &ActivationPlan,
    nbits: u8,
) -> Result<QuantizedUniformMatrix> {
    let reordered = apply_plan_to_weights(w_smoothed, plan)?;
    let q = quantize_uniform(
        &reordered,
        nbits,
        Granularity::PerBankColumn {
            bank_size: plan.banking.bank_size(),
        },
    )?;
    Ok(q.with_row_perm(plan.perm.clone()))
}

/// How the channels of an [`ActivationSplit`] were chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitLayout {
    /// Shared plan; channel indices refer to weight rows reordered by `perm`.
    Static { perm: Vec<usize> },
    /// Per-row magnitude selection; channel indices refer to original rows.
    Dynamic { masks: Mask },
}

/// An `M × K` activation split into a high- and a low-precision part.
///
/// Each row carries `H = banks·n_high` high codes and `L = banks·n_low` low
/// codes with one scale per row and part. `high_index[r·H + j]` is the weight
/// row the `j`-th high code of row `r` multiplies (likewise for low).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSplit {
    rows: usize,
    k: usize,
    banking: BankConfig,
    precision: PrecisionPair,
    high_codes: Vec<i8>,
    high_scales: Vec<f32>,
    high_index: Vec<u32>,
    low_codes: Vec<i8>,
    low_scales: Vec<f32>,
    low_index: Vec<u32>,
    layout: SplitLayout,
}

impl ActivationSplit {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn banking(&self) -> BankConfig {
        self.banking
    }

    pub fn precision(&self) -> PrecisionPair {
        self.precision
    }

    pub fn layout(&self) -> &SplitLayout {
        &self.layout
    }

    /// High codes per row.
    pub fn high_width(&self) -> usize {
        self.k / self.banking.bank_size() * self.banking.n_high()
    }

    /// Low codes per row.
    pub fn low_width(&self) -> usize {
        self.k - self.high_width()
    }

    pub fn high_row(&self, r: usize) -> (&[i8], &[u32], f32) {
        let h = self.high_width();
        (
            &self.high_codes[r * h..(r + 1) * h],
            &self.high_index[r * h..(r + 1) * h],
            self.high_scales[r],
        )
    }

    pub fn low_row(&self, r: usize) -> (&[i8], &[u32], f32) {
        let l = self.low_width();
        (
            &self.low_codes[r * l..(r + 1) * l],
            &self.low_index[r * l..(r + 1) * l],
            self.low_scales[r],
        )
    }

    pub fn high_scales(&self) -> &[f32] {
        &self.high_scales
    }

    pub fn low_scales(&self) -> &[f32] {
        &self.low_scales
    }

    /// Per-row masks of a dynamic split.
    pub fn row_masks(&self) -> Option<&Mask> {
        match &self.layout {
            SplitLayout::Dynamic { masks } => Some(masks),
            SplitLayout::Static { .. } => None,
        }
    }

    /// Dequantized activations in the original channel order.
    pub fn dequantize(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.k);
        let to_original = |idx: u32| match &self.layout {
            SplitLayout::Static { perm } => perm[idx as usize],
            SplitLayout::Dynamic { .. } => idx as usize,
        };
        for r in 0..self.rows {
            for part in [self.high_row(r), self.low_row(r)] {
                let (codes, index, scale) = part;
                for (&c, &i) in codes.iter().zip(index) {
                    out.set(r, to_original(i), f64::from(c) * f64::from(scale));
                }
            }
        }
        out
    }
}

struct SplitBuilder {
    high_codes: Vec<i8>,
    high_scales: Vec<f32>,
    high_index: Vec<u32>,
    low_codes: Vec<i8>,
    low_scales: Vec<f32>,
    low_index: Vec<u32>,
    hi_vals: Vec<f64>,
    lo_vals: Vec<f64>,
}

impl SplitBuilder {
    fn new(rows: usize, k: usize, high_width: usize) -> Self {
        let low_width = k - high_width;
        Self {
            high_codes: Vec::with_capacity(rows * high_width),
            high_scales: Vec::with_capacity(rows),
            high_index: Vec::with_capacity(rows * high_width),
            low_codes: Vec::with_capacity(rows * low_width),
            low_scales: Vec::with_capacity(rows),
            low_index: Vec::with_capacity(rows * low_width),
            hi_vals: Vec::with_capacity(high_width),
            lo_vals: Vec::with_capacity(low_width),
        }
    }

    /// Quantizes one row; `hi`/`lo` pair each value with its weight-row index.
    fn push_row(
        &mut self,
        precision: PrecisionPair,
        hi: impl Iterator<Item = (f64, usize)>,
        lo: impl Iterator<Item = (f64, usize)>,
    ) -> Result<()> {
        self.hi_vals.clear();
        for (v, i) in hi {
            self.hi_vals.push(v);
            self.high_index.push(i as u32);
        }
        self.lo_vals.clear();
        for (v, i) in lo {
            self.lo_vals.push(v);
            self.low_index.push(i as u32);
        }
        let (hc, hs) = quantize_group(&self.hi_vals, precision.high())?;
        let (lc, ls) = quantize_group(&self.lo_vals, precision.low())?;
        self.high_codes.extend(hc);
        self.high_scales.push(hs);
        self.low_codes.extend(lc);
        self.low_scales.push(ls);
        Ok(())
    }

    fn finish(
        self,
        rows: usize,
        k: usize,
        banking: BankConfig,
        precision: PrecisionPair,
        layout: SplitLayout,
    ) -> ActivationSplit {
        ActivationSplit {
            rows,
            k,
            banking,
            precision,
            high_codes: self.high_codes,
            high_scales: self.high_scales,
            high_index: self.high_index,
            low_codes: self.low_codes,
            low_scales: self.low_scales,
            low_index: self.low_index,
            layout,
        }
    }
}

/// Splits activations with a precomputed plan: channels are reordered by
/// `plan.perm`, the leading `n_high` slots of each bank go to `h_high`.
pub fn quantize_activations_static(a: &Matrix, plan: &ActivationPlan) -> Result<ActivationSplit> {
    let k = plan.k();
    if a.cols() != k {
        return Err(SqError::structure(format!(
            "activations have {} channels, plan covers {k}",
            a.cols()
        )));
    }
    a.ensure_finite("activations")?;
    let b = plan.banking.bank_size();
    let n_high = plan.banking.n_high();
    let high_width = k / b * n_high;
    let is_high_slot = |slot: usize| slot % b < n_high;
    let mut builder = SplitBuilder::new(a.rows(), k, high_width);
    for r in 0..a.rows() {
        let row = a.row(r);
        builder.push_row(
            plan.precision,
            (0..k).filter(|&s| is_high_slot(s)).map(|s| (row[plan.perm[s]], s)),
            (0..k).filter(|&s| !is_high_slot(s)).map(|s| (row[plan.perm[s]], s)),
        )?;
    }
    Ok(builder.finish(
        a.rows(),
        k,
        plan.banking,
        plan.precision,
        SplitLayout::Static {
            perm: plan.perm.clone(),
        },
    ))
}

/// Splits each row independently: per bank, the `n_high` largest |a| go to
/// `h_high` (ties to the lower index).
pub fn quantize_activations_dynamic(
    a: &Matrix,
    banking: BankConfig,
    precision: PrecisionPair,
) -> Result<ActivationSplit> {
    let k = a.cols();
    let banks = banking.bank_count(k)?;
    a.ensure_finite("activations")?;
    let b = banking.bank_size();
    let high_width = banks * banking.n_high();
    let mut masks = Mask::new(a.rows(), k);
    let mut builder = SplitBuilder::new(a.rows(), k, high_width);
    let mut mags = vec![0.0; b];
    let mut flags = vec![false; k];
    for r in 0..a.rows() {
        let row = a.row(r);
        for bank in 0..banks {
            for (i, m) in mags.iter_mut().enumerate() {
                *m = row[bank * b + i].abs();
            }
            top_k_flags(&mags, banking.n_high(), &mut flags[bank * b..(bank + 1) * b]);
        }
        for (c, &f) in flags.iter().enumerate() {
            masks.set(r, c, f);
        }
        builder.push_row(
            precision,
            (0..k).filter(|&c| flags[c]).map(|c| (row[c], c)),
            (0..k).filter(|&c| !flags[c]).map(|c| (row[c], c)),
        )?;
    }
    Ok(builder.finish(a.rows(), k, banking, precision, SplitLayout::Dynamic { masks }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pp(h: u8, l: u8) -> PrecisionPair {
        PrecisionPair::new(h, l).unwrap()
    }

    #[test]
    fn channel_importance_examples() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.25, 0.25]]).unwrap();
        let i = activation_channel_importance(&[1.0, -2.0], &w).unwrap();
        assert_eq!(i.scores(), &[3.0, 1.0]);

        let i0 = activation_channel_importance(&[0.0, 1.0], &w).unwrap();
        assert_eq!(i0.scores()[0], 0.0);

        let neg = w.scale(-1.0);
        assert_eq!(
            activation_channel_importance(&[1.0, -2.0], &neg).unwrap(),
            activation_channel_importance(&[1.0, -2.0], &w).unwrap()
        );
    }

    #[test]
    fn plan_examples() {
        let imp = ChannelImportance::new(vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let plan = build_activation_plan(&imp, BankConfig::new(4, 0.75).unwrap(), pp(8, 4)).unwrap();
        assert_eq!(plan.channel_mask(), &[false, true, false, false]);
        assert_eq!(plan.perm(), &[1, 0, 2, 3]);

        let imp = ChannelImportance::new(vec![5.0, 1.0, 2.0, 8.0]).unwrap();
        let plan = build_activation_plan(&imp, BankConfig::new(2, 0.5).unwrap(), pp(8, 4)).unwrap();
        assert_eq!(plan.channel_mask(), &[true, false, false, true]);
        assert_eq!(plan.perm(), &[0, 1, 3, 2]);

        let imp = ChannelImportance::new(vec![1.0; 8]).unwrap();
        let plan = build_activation_plan(&imp, BankConfig::new(4, 0.5).unwrap(), pp(8, 4)).unwrap();
        assert_eq!(plan.perm(), &[0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn plan_validation_rejects_cross_bank_perm() {
        let bc = BankConfig::new(2, 0.5).unwrap();
        let bad = ActivationPlan::from_parts(bc, pp(8, 4), vec![true, false, true, false], vec![0, 2, 1, 3]);
        assert!(bad.is_err());
        let wrong_count =
            ActivationPlan::from_parts(bc, pp(8, 4), vec![true, true, true, false], vec![0, 1, 2, 3]);
        assert!(wrong_count.is_err());
    }

    #[test]
    fn static_split_hand_example() {
        let plan = ActivationPlan::from_parts(
            BankConfig::new(2, 0.5).unwrap(),
            pp(8, 4),
            vec![true, false],
            vec![0, 1],
        )
        .unwrap();
        let a = Matrix::from_rows(&[vec![100.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let split = quantize_activations_static(&a, &plan).unwrap();
        let (hc, _, hs) = split.high_row(0);
        assert_eq!(hc, &[127]);
        assert_eq!(hs, (100.0f64 / 127.0) as f32);
        let (lc, _, ls) = split.low_row(0);
        assert_eq!(lc, &[7]);
        assert_eq!(ls, (1.0f64 / 7.0) as f32);
        assert_eq!(split.high_scales()[1], 0.0);
        assert_eq!(split.low_scales()[1], 0.0);
    }

    #[test]
    fn dynamic_split_selects_by_magnitude() {
        let a = Matrix::from_rows(&[vec![0.0, 9.0, 1.0, 2.0], vec![3.0, 3.0, 3.0, 3.0]]).unwrap();
        let split =
            quantize_activations_dynamic(&a, BankConfig::new(4, 0.5).unwrap(), pp(8, 4)).unwrap();
        let masks = split.row_masks().unwrap();
        assert_eq!(&masks.as_slice()[..4], &[false, true, false, true]);
        assert_eq!(&masks.as_slice()[4..], &[true, true, false, false]);
        assert_eq!(split.high_row(0).1, &[1, 3]);
    }

    #[test]
    fn static_dequantize_returns_original_order() {
        let imp = ChannelImportance::new(vec![0.0, 5.0, 1.0, 0.0]).unwrap();
        let plan = build_activation_plan(&imp, BankConfig::new(4, 0.5).unwrap(), pp(8, 8 - 1)).unwrap();
        let a = Matrix::from_rows(&[vec![0.5, -3.0, 1.25, 2.0]]).unwrap();
        let d = quantize_activations_static(&a, &plan).unwrap().dequantize();
        for c in 0..4 {
            assert!((d.get(0, c) - a.get(0, c)).abs() < 0.02, "{c}: {}", d.get(0, c));
        }
    }

    #[test]
    fn apply_plan_round_trip() {
        let imp = ChannelImportance::new(vec![1.0, 9.0, 3.0, 4.0, 0.0, 2.0, 7.0, 1.0]).unwrap();
        let plan = build_activation_plan(&imp, BankConfig::new(4, 0.5).unwrap(), pp(8, 4)).unwrap();
        let w = Matrix::from_fn(8, 3, |r, c| (r * 3 + c) as f64 - 4.5);
        let re = apply_plan_to_weights(&w, &plan).unwrap();
        assert_eq!(re.permute_rows(&plan.inverse_perm()).unwrap(), w);
        assert!(apply_plan_to_weights(&Matrix::zeros(4, 3), &plan).is_err());
    }
}
