//! SQ-format domain types and the sentinel-coded weight layout.
//!
//! A matrix is split along its reduction dimension `K` into banks of `b`
//! elements. Inside every (bank, output-column) group, `n_high = b·(1−s)`
//! elements are quantized at `h_high` bits and stored compactly, while the
//! remaining elements stay in a dense grid quantized at `h_low` bits. The
//! dense grid marks the positions of the compact elements with a reserved
//! sentinel code.

mod scalar;
mod uniform;
mod weight;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SqError};

pub use scalar::{quantize_group, sentinel_code, symmetric_range};
pub use uniform::{quantize_uniform, Granularity, QuantizedUniformMatrix};
pub use weight::{decode_weight, encode_weight, GroupScales, SqWeightMatrix};

/// Maximum bit-width representable by the one-byte code storage.
pub const MAX_BITS: u8 = 8;

/// The `(h_high, h_low)` bit-widths of an SQ split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPair {
    high: u8,
    low: u8,
}

impl PrecisionPair {
    pub fn new(high: u8, low: u8) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&high) {
            return Err(SqError::param(format!("h_high must be in 2..=8, got {high}")));
        }
        if low > MAX_BITS {
            return Err(SqError::param(format!("h_low must be in 0..=8, got {low}")));
        }
        if low >= high {
            return Err(SqError::param(format!(
                "h_low ({low}) must be below h_high ({high})"
            )));
        }
        Ok(Self { high, low })
    }

    #[inline]
    pub fn high(&self) -> u8 {
        self.high
    }

    #[inline]
    pub fn low(&self) -> u8 {
        self.low
    }

    /// `h_low = 0`: the low part contributes exactly zero.
    pub fn is_pure_sparse(&self) -> bool {
        self.low == 0
    }
}

impl fmt::Display for PrecisionPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.high, self.low)
    }
}

impl FromStr for PrecisionPair {
    type Err = SqError;

    fn from_str(s: &str) -> Result<Self> {
        let (h, l) = s
            .trim()
            .split_once('/')
            .ok_or_else(|| SqError::param(format!("precision pair '{s}' is not of the form H/L")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u8>()
                .map_err(|_| SqError::param(format!("bad bit-width '{v}' in '{s}'")))
        };
        PrecisionPair::new(parse(h)?, parse(l)?)
    }
}

/// Bank size `b` and the per-bank count of high-precision elements.
///
/// Sparsity is kept as the exact ratio `1 − n_high/b`; configurations where
/// `b·(1−s)` is not an integer are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BankConfig {
    bank_size: usize,
    n_high: usize,
}

impl BankConfig {
    pub fn new(bank_size: usize, sparsity: f64) -> Result<Self> {
        if !sparsity.is_finite() || !(0.0..1.0).contains(&sparsity) {
            return Err(SqError::param(format!("sparsity must be in [0, 1), got {sparsity}")));
        }
        let exact = bank_size as f64 * (1.0 - sparsity);
        let n_high = exact.round();
        if (exact - n_high).abs() > 1e-9 {
            return Err(SqError::param(format!(
                "bank size {bank_size} with sparsity {sparsity} gives a fractional high count {exact}"
            )));
        }
        Self::from_counts(bank_size, n_high as usize)
    }

    pub fn from_counts(bank_size: usize, n_high: usize) -> Result<Self> {
        if bank_size < 2 {
            return Err(SqError::param(format!("bank size must be >= 2, got {bank_size}")));
        }
        if n_high == 0 || n_high > bank_size {
            return Err(SqError::param(format!(
                "high count {n_high} must be in 1..={bank_size}"
            )));
        }
        Ok(Self { bank_size, n_high })
    }

    #[inline]
    pub fn bank_size(&self) -> usize {
        self.bank_size
    }

    #[inline]
    pub fn n_high(&self) -> usize {
        self.n_high
    }

    #[inline]
    pub fn n_low(&self) -> usize {
        self.bank_size - self.n_high
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.n_high as f64 / self.bank_size as f64
    }

    /// Number of banks along a reduction dimension of length `k`.
    pub fn bank_count(&self, k: usize) -> Result<usize> {
        if k == 0 || k % self.bank_size != 0 {
            return Err(SqError::structure(format!(
                "bank size {} does not divide K = {k}",
                self.bank_size
            )));
        }
        Ok(k / self.bank_size)
    }
}

/// A full `B-(h_high/h_low)-s` configuration, e.g. `32-(8/4)-0.75`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SqConfig {
    pub banking: BankConfig,
    pub precision: PrecisionPair,
}

impl SqConfig {
    pub fn new(bank_size: usize, sparsity: f64, high: u8, low: u8) -> Result<Self> {
        Ok(Self {
            banking: BankConfig::new(bank_size, sparsity)?,
            precision: PrecisionPair::new(high, low)?,
        })
    }
}

impl fmt::Display for SqConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-({})-{}",
            self.banking.bank_size(),
            self.precision,
            self.banking.sparsity()
        )
    }
}

impl FromStr for SqConfig {
    type Err = SqError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || SqError::param(format!("'{s}' is not of the form B-(H/L)-S"));
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        let close = s.find(')').ok_or_else(bad)?;
        if close < open {
            return Err(bad());
        }
        let bank = s[..open].strip_suffix('-').ok_or_else(bad)?;
        let sparsity = s[close + 1..].strip_prefix('-').ok_or_else(bad)?;
        let bank_size: usize = bank.parse().map_err(|_| bad())?;
        let sparsity: f64 = sparsity.parse().map_err(|_| bad())?;
        Ok(Self {
            banking: BankConfig::new(bank_size, sparsity)?,
            precision: s[open + 1..close].parse()?,
        })
    }
}
