//! Dense row-major `f64` matrix used for every float operand in the crate.

use crate::error::{Result, SqError};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SqError::structure(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SqError::structure("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(SqError::CorruptInput(format!(
                "{what} has a non-finite value at ({}, {})",
                i / self.cols.max(1),
                i % self.cols.max(1)
            ))),
        }
    }

    /// Dense product `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(SqError::structure(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.ensure_same_shape(rhs)?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute value in each row.
    pub fn row_abs_max(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect()
    }

    /// Largest absolute value in each column.
    pub fn col_abs_max(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (m, v) in out.iter_mut().zip(self.row(r)) {
                *m = m.max(v.abs());
            }
        }
        out
    }

    /// Divides column `j` by `divisors[j]`.
    pub fn div_columns(&self, divisors: &[f64]) -> Result<Matrix> {
        if divisors.len() != self.cols {
            return Err(SqError::structure(format!(
                "{} column divisors for a matrix with {} columns",
                divisors.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, d) in out.row_mut(r).iter_mut().zip(divisors) {
                *v /= d;
            }
        }
        Ok(out)
    }

    /// Reorders columns so that output column `i` is input column `perm[i]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Matrix> {
        if perm.len() != self.cols {
            return Err(SqError::structure("column permutation length mismatch"));
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |r, c| self.get(r, perm[c])))
    }

    /// Reorders rows so that output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Matrix> {
        if perm.len() != self.rows {
            return Err(SqError::structure("row permutation length mismatch"));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(self.row(src));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    fn ensure_same_shape(&self, rhs: &Matrix) -> Result<()> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(SqError::structure(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }
}

/// Row-major boolean matrix; `true` marks a high-precision position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(SqError::structure(format!(
                "mask length {} does not match {rows}x{cols}",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `‖approx − reference‖_F / ‖reference‖_F`.
pub fn relative_frobenius(reference: &Matrix, approx: &Matrix) -> Result<f64> {
    let denom = reference.frobenius_norm();
    if denom == 0.0 {
        return Err(SqError::Numerical(
            "relative error undefined for a zero reference".into(),
        ));
    }
    Ok(approx.sub(reference)?.frobenius_norm() / denom)
}
