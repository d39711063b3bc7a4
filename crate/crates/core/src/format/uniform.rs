use serde::{Deserialize, Serialize};

use super::scalar::{quantize_group, symmetric_range};
use crate::error::{Result, SqError};
use crate::matrix::Matrix;

/// Which elements share one symmetric scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    /// One scale per row (per token for activations).
    PerRow,
    /// One scale per `bank_size` consecutive rows of each column.
    PerBankColumn { bank_size: usize },
}

/// Plain symmetric quantization of a whole matrix; the baseline carrier for
/// uniform W4/A8-style quantization and the operand type of the hybrid GEMMs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedUniformMatrix {
    rows: usize,
    cols: usize,
    bits: u8,
    granularity: Granularity,
    codes: Vec<i8>,
    scales: Vec<f32>,
    /// Set when the rows were reordered by an activation plan; `row_perm[i]`
    /// is the original row stored at row `i`.
    row_perm: Option<Vec<usize>>,
}

impl QuantizedUniformMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn row_perm(&self) -> Option<&[usize]> {
        self.row_perm.as_deref()
    }

    pub(crate) fn with_row_perm(mut self, perm: Vec<usize>) -> Self {
        self.row_perm = Some(perm);
        self
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> i8 {
        self.codes[r * self.cols + c]
    }

    #[inline]
    pub fn scale_index(&self, r: usize, c: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerRow => r,
            Granularity::PerBankColumn { bank_size } => (r / bank_size) * self.cols + c,
        }
    }

    #[inline]
    pub fn scale(&self, r: usize, c: usize) -> f32 {
        self.scales[self.scale_index(r, c)]
    }

    /// Length of the runs of consecutive rows that share a scale within a
    /// column: `rows` for per-tensor, 1 for per-row, the bank size otherwise.
    pub fn row_run(&self) -> usize {
        match self.granularity {
            Granularity::PerTensor => self.rows.max(1),
            Granularity::PerRow => 1,
            Granularity::PerBankColumn { bank_size } => bank_size,
        }
    }

    pub fn dequantize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| {
            f64::from(self.code(r, c)) * f64::from(self.scale(r, c))
        })
    }
}

/// Symmetric quantization of `x` at `nbits` with the requested scale sharing.
pub fn quantize_uniform(
    x: &Matrix,
    nbits: u8,
    granularity: Granularity,
) -> Result<QuantizedUniformMatrix> {
    if !(2..=super::MAX_BITS).contains(&nbits) {
        return Err(SqError::param(format!(
            "uniform quantization needs 2..=8 bits, got {nbits}"
        )));
    }
    x.ensure_finite("quantization input")?;
    let (rows, cols) = (x.rows(), x.cols());
    let mut codes = vec![0i8; rows * cols];
    let scales = match granularity {
        Granularity::PerTensor => {
            let (c, s) = quantize_group(x.as_slice(), nbits)?;
            codes = c;
            vec![s]
        }
        Granularity::PerRow => {
            let mut scales = Vec::with_capacity(rows);
            for r in 0..rows {
                let (c, s) = quantize_group(x.row(r), nbits)?;
                codes[r * cols..(r + 1) * cols].copy_from_slice(&c);
                scales.push(s);
            }
            scales
        }
        Granularity::PerBankColumn { bank_size } => {
            if bank_size == 0 || rows % bank_size != 0 {
                return Err(SqError::param(format!(
                    "invalid granularity: bank size {bank_size} does not divide {rows} rows"
                )));
            }
            let banks = rows / bank_size;
            let mut scales = vec![0f32; banks * cols];
            let mut group = Vec::with_capacity(bank_size);
            for bank in 0..banks {
                for c in 0..cols {
                    group.clear();
                    group.extend((bank * bank_size..(bank + 1) * bank_size).map(|r| x.get(r, c)));
                    let (gc, s) = quantize_group(&group, nbits)?;
                    for (i, code) in gc.into_iter().enumerate() {
                        codes[(bank * bank_size + i) * cols + c] = code;
                    }
                    scales[bank * cols + c] = s;
                }
            }
            scales
        }
    };
    debug_assert!({
        let (_, qmax) = symmetric_range(nbits);
        codes.iter().all(|&c| i32::from(c).abs() <= qmax)
    });
    Ok(QuantizedUniformMatrix {
        rows,
        cols,
        bits: nbits,
        granularity,
        codes,
        scales,
        row_perm: None,
    })
}
