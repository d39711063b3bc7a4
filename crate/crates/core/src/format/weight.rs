use serde::{Deserialize, Serialize};

use super::scalar::{quantize_group, sentinel_code, symmetric_range};
use super::{BankConfig, PrecisionPair};
use crate::error::{Result, SqError};
use crate::matrix::{Mask, Matrix};

/// One `(s_high, s_low)` pair per (bank, output-column) group, stored
/// row-major as `banks × N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScales {
    banks: usize,
    cols: usize,
    high: Vec<f32>,
    low: Vec<f32>,
}

impl GroupScales {
    pub fn from_parts(banks: usize, cols: usize, high: Vec<f32>, low: Vec<f32>) -> Result<Self> {
        if high.len() != banks * cols || low.len() != banks * cols {
            return Err(SqError::structure(format!(
                "scale grids must hold {banks}x{cols} entries (got {} and {})",
                high.len(),
                low.len()
            )));
        }
        Ok(Self {
            banks,
            cols,
            high,
            low,
        })
    }

    #[inline]
    pub fn high(&self, bank: usize, col: usize) -> f32 {
        self.high[bank * self.cols + col]
    }

    #[inline]
    pub fn low(&self, bank: usize, col: usize) -> f32 {
        self.low[bank * self.cols + col]
    }

    pub fn banks(&self) -> usize {
        self.banks
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn high_grid(&self) -> &[f32] {
        &self.high
    }

    pub fn low_grid(&self) -> &[f32] {
        &self.low
    }
}

/// A `K × N` weight matrix in SQ-format.
///
/// `low_codes` keeps the original `K × N` shape with sentinel codes at the
/// high-precision positions. `high_codes` is `(banks·n_high) × N`; row
/// `bank·n_high + j` holds the `j`-th high element (ascending original row)
/// of that bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqWeightMatrix {
    k: usize,
    n: usize,
    banking: BankConfig,
    precision: PrecisionPair,
    low_codes: Vec<i8>,
    high_codes: Vec<i8>,
    scales: GroupScales,
}

impl SqWeightMatrix {
    /// Assembles a matrix from raw parts and checks every layout invariant.
    pub fn from_parts(
        k: usize,
        n: usize,
        banking: BankConfig,
        precision: PrecisionPair,
        low_codes: Vec<i8>,
        high_codes: Vec<i8>,
        scales: GroupScales,
    ) -> Result<Self> {
        let m = Self {
            k,
            n,
            banking,
            precision,
            low_codes,
            high_codes,
            scales,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn banking(&self) -> BankConfig {
        self.banking
    }

    pub fn precision(&self) -> PrecisionPair {
        self.precision
    }

    pub fn low_codes(&self) -> &[i8] {
        &self.low_codes
    }

    pub fn high_codes(&self) -> &[i8] {
        &self.high_codes
    }

    pub fn scales(&self) -> &GroupScales {
        &self.scales
    }

    pub fn sentinel(&self) -> i8 {
        sentinel_code(self.precision.low())
    }

    pub fn bank_count(&self) -> usize {
        self.k / self.banking.bank_size()
    }

    #[inline]
    pub fn low_code(&self, row: usize, col: usize) -> i8 {
        self.low_codes[row * self.n + col]
    }

    /// High code `slot` (0-based, ascending row order) of group `(bank, col)`.
    #[inline]
    pub fn high_code(&self, bank: usize, slot: usize, col: usize) -> i8 {
        self.high_codes[(bank * self.banking.n_high() + slot) * self.n + col]
    }

    /// Mask of high-precision positions recovered from the sentinel codes.
    pub fn high_mask(&self) -> Mask {
        let sentinel = self.sentinel();
        let bits = self.low_codes.iter().map(|&c| c == sentinel).collect();
        Mask::from_vec(self.k, self.n, bits).expect("shape checked at construction")
    }

    /// Checks the sentinel census, code ranges, scale sanity and shapes.
    pub fn validate(&self) -> Result<()> {
        let banks = self.banking.bank_count(self.k)?;
        let b = self.banking.bank_size();
        let n_high = self.banking.n_high();
        if self.low_codes.len() != self.k * self.n {
            return Err(SqError::structure(format!(
                "low code grid has {} entries, expected {}",
                self.low_codes.len(),
                self.k * self.n
            )));
        }
        if self.high_codes.len() != banks * n_high * self.n {
            return Err(SqError::structure(format!(
                "high code store has {} entries, expected {}",
                self.high_codes.len(),
                banks * n_high * self.n
            )));
        }
        if self.scales.banks != banks || self.scales.cols != self.n {
            return Err(SqError::structure("scale grid shape does not match the banking"));
        }
        let sentinel = self.sentinel();
        let (_, low_max) = symmetric_range(self.precision.low());
        let (_, high_max) = symmetric_range(self.precision.high());
        for bank in 0..banks {
            for col in 0..self.n {
                let s_high = self.scales.high(bank, col);
                let s_low = self.scales.low(bank, col);
                for (name, s) in [("s_high", s_high), ("s_low", s_low)] {
                    if !s.is_finite() || s < 0.0 {
                        return Err(SqError::structure(format!(
                            "{name} of group (bank {bank}, column {col}) is {s}"
                        )));
                    }
                }
                let mut census = 0;
                for row in bank * b..(bank + 1) * b {
                    let c = self.low_code(row, col);
                    if c == sentinel {
                        census += 1;
                    } else if i32::from(c).abs() > low_max {
                        return Err(SqError::structure(format!(
                            "low code {c} at ({row}, {col}) outside the {}-bit range",
                            self.precision.low()
                        )));
                    } else if c != 0 && s_low == 0.0 {
                        return Err(SqError::structure(format!(
                            "nonzero low code at ({row}, {col}) in a zero-scale group"
                        )));
                    }
                }
                if census != n_high {
                    return Err(SqError::structure(format!(
                        "group (bank {bank}, column {col}) has {census} sentinel codes, expected {n_high}"
                    )));
                }
                for slot in 0..n_high {
                    let c = self.high_code(bank, slot, col);
                    if i32::from(c).abs() > high_max {
                        return Err(SqError::structure(format!(
                            "high code {c} of group (bank {bank}, column {col}) outside the {}-bit range",
                            self.precision.high()
                        )));
                    }
                    if c != 0 && s_high == 0.0 {
                        return Err(SqError::structure(format!(
                            "nonzero high code in zero-scale group (bank {bank}, column {col})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Encodes a (smoothed) `K × N` weight matrix with a given high-precision mask.
///
/// The mask must mark exactly `n_high` entries in every (bank, column) group.
pub fn encode_weight(
    w: &Matrix,
    mask: &Mask,
    banking: BankConfig,
    precision: PrecisionPair,
) -> Result<SqWeightMatrix> {
    let (k, n) = (w.rows(), w.cols());
    if mask.rows() != k || mask.cols() != n {
        return Err(SqError::structure(format!(
            "mask is {}x{} but the weight is {k}x{n}",
            mask.rows(),
            mask.cols()
        )));
    }
    w.ensure_finite("weight")?;
    let banks = banking.bank_count(k)?;
    let b = banking.bank_size();
    let n_high = banking.n_high();
    let sentinel = sentinel_code(precision.low());

    let mut low_codes = vec![0i8; k * n];
    let mut high_codes = vec![0i8; banks * n_high * n];
    let mut s_high = vec![0f32; banks * n];
    let mut s_low = vec![0f32; banks * n];

    let mut hi_rows = Vec::with_capacity(n_high);
    let mut lo_rows = Vec::with_capacity(b);
    let mut hi_vals = Vec::with_capacity(n_high);
    let mut lo_vals = Vec::with_capacity(b);
    for bank in 0..banks {
        for col in 0..n {
            hi_rows.clear();
            lo_rows.clear();
            for row in bank * b..(bank + 1) * b {
                if mask.get(row, col) {
                    hi_rows.push(row);
                } else {
                    lo_rows.push(row);
                }
            }
            if hi_rows.len() != n_high {
                return Err(SqError::structure(format!(
                    "mask marks {} entries in group (bank {bank}, column {col}), expected {n_high}",
                    hi_rows.len()
                )));
            }
            hi_vals.clear();
            hi_vals.extend(hi_rows.iter().map(|&r| w.get(r, col)));
            lo_vals.clear();
            lo_vals.extend(lo_rows.iter().map(|&r| w.get(r, col)));

            let (hc, hs) = quantize_group(&hi_vals, precision.high())?;
            let (lc, ls) = quantize_group(&lo_vals, precision.low())?;
            s_high[bank * n + col] = hs;
            s_low[bank * n + col] = ls;
            for (slot, code) in hc.into_iter().enumerate() {
                high_codes[(bank * n_high + slot) * n + col] = code;
            }
            for (&row, code) in lo_rows.iter().zip(lc) {
                low_codes[row * n + col] = code;
            }
            for &row in &hi_rows {
                low_codes[row * n + col] = sentinel;
            }
        }
    }

    Ok(SqWeightMatrix {
        k,
        n,
        banking,
        precision,
        low_codes,
        high_codes,
        scales: GroupScales::from_parts(banks, n, s_high, s_low)?,
    })
}

/// Reconstructs the float matrix an SQ weight represents.
pub fn decode_weight(sq: &SqWeightMatrix) -> Result<Matrix> {
    sq.validate()?;
    let (k, n) = (sq.k, sq.n);
    let b = sq.banking.bank_size();
    let sentinel = sq.sentinel();
    let mut out = Matrix::zeros(k, n);
    for bank in 0..sq.bank_count() {
        for col in 0..n {
            let s_high = f64::from(sq.scales.high(bank, col));
            let s_low = f64::from(sq.scales.low(bank, col));
            let mut slot = 0;
            for row in bank * b..(bank + 1) * b {
                let c = sq.low_code(row, col);
                let v = if c == sentinel {
                    let h = sq.high_code(bank, slot, col);
                    slot += 1;
                    f64::from(h) * s_high
                } else {
                    f64::from(c) * s_low
                };
                out.set(row, col, v);
            }
        }
    }
    Ok(out)
}
