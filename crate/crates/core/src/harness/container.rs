//! `SQT1` binary container.
//!
//! ```text
//! file    := "SQT1" version:u16 count:u32 section*
//! section := kind:u8 name_len:u16 name:utf8 payload
//!
//! kind 1, float tensor : dtype:u8 (0 = f32, 1 = f64) ndim:u8 dims:u64* data
//! kind 2, SQ tensor    : bank_size:u32 n_high:u32 h_high:u8 h_low:u8 K:u64 N:u64
//!                        low_codes:i8[K·N] high_len:u64 high_codes:i8[high_len]
//!                        s_high:f32[banks·N] s_low:f32[banks·N]
//!                        has_plan:u8 [plan payload]
//! kind 3, plan         : bank_size:u32 n_high:u32 h_high:u8 h_low:u8 K:u64
//!                        mask:u8[K] perm:u32[K]
//! kind 4, calib stats  : K:u64 n_samples:u64 amax:f64[K] channel_sum:f64[K] hessian:f64[K·K]
//! ```
//!
//! All integers are little-endian. Codes take one byte each, sign-extended.

use std::fs;
use std::path::Path;

use crate::calibration::CalibStats;
use crate::error::{Result, SqError};
use crate::format::{BankConfig, GroupScales, PrecisionPair, SqWeightMatrix};
use crate::matrix::Matrix;
use crate::quantizers::ActivationPlan;

pub const MAGIC: &[u8; 4] = b"SQT1";
pub const VERSION: u16 = 1;

const KIND_FLOAT: u8 = 1;
const KIND_SQ: u8 = 2;
const KIND_PLAN: u8 = 3;
const KIND_CALIB: u8 = 4;

/// Element type used when writing a float tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatDtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Float { data: Matrix, dtype: FloatDtype },
    Sq { weight: SqWeightMatrix, plan: Option<ActivationPlan> },
    Plan(ActivationPlan),
    Calib(CalibStats),
}

impl Payload {
    fn kind_name(&self) -> &'static str {
        match self {
            Payload::Float { .. } => "float tensor",
            Payload::Sq { .. } => "sq tensor",
            Payload::Plan(_) => "activation plan",
            Payload::Calib(_) => "calibration stats",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub payload: Payload,
}

/// An ordered list of named sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, payload: Payload) -> &mut Self {
        self.sections.push(Section {
            name: name.into(),
            payload,
        });
        self
    }

    pub fn push_float(&mut self, name: impl Into<String>, data: Matrix) -> &mut Self {
        self.push(
            name,
            Payload::Float {
                data,
                dtype: FloatDtype::F64,
            },
        )
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.sections.iter().find(|s| s.name == name).map(|s| &s.payload)
    }

    fn require(&self, name: &str) -> Result<&Payload> {
        self.get(name)
            .ok_or_else(|| SqError::parse(name, "section not present in container"))
    }

    pub fn float(&self, name: &str) -> Result<&Matrix> {
        match self.require(name)? {
            Payload::Float { data, .. } => Ok(data),
            other => Err(wrong_kind(name, "float tensor", other)),
        }
    }

    pub fn sq(&self, name: &str) -> Result<(&SqWeightMatrix, Option<&ActivationPlan>)> {
        match self.require(name)? {
            Payload::Sq { weight, plan } => Ok((weight, plan.as_ref())),
            other => Err(wrong_kind(name, "sq tensor", other)),
        }
    }

    pub fn plan(&self, name: &str) -> Result<&ActivationPlan> {
        match self.require(name)? {
            Payload::Plan(p) => Ok(p),
            Payload::Sq { plan: Some(p), .. } => Ok(p),
            other => Err(wrong_kind(name, "activation plan", other)),
        }
    }

    pub fn calib(&self, name: &str) -> Result<&CalibStats> {
        match self.require(name)? {
            Payload::Calib(c) => Ok(c),
            other => Err(wrong_kind(name, "calibration stats", other)),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u16(&mut out, VERSION);
        put_u32(&mut out, u32::try_from(self.sections.len()).map_err(too_large)?);
        for section in &self.sections {
            let kind = match section.payload {
                Payload::Float { .. } => KIND_FLOAT,
                Payload::Sq { .. } => KIND_SQ,
                Payload::Plan(_) => KIND_PLAN,
                Payload::Calib(_) => KIND_CALIB,
            };
            out.push(kind);
            let name = section.name.as_bytes();
            put_u16(&mut out, u16::try_from(name.len()).map_err(too_large)?);
            out.extend_from_slice(name);
            match &section.payload {
                Payload::Float { data, dtype } => write_float(&mut out, data, *dtype),
                Payload::Sq { weight, plan } => {
                    write_sq(&mut out, weight)?;
                    match plan {
                        Some(p) => {
                            out.push(1);
                            write_plan(&mut out, p)?;
                        }
                        None => out.push(0),
                    }
                }
                Payload::Plan(p) => write_plan(&mut out, p)?,
                Payload::Calib(c) => write_calib(&mut out, c),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "header");
        if r.take(4, "magic")? != MAGIC {
            return Err(SqError::parse("header", "bad magic, expected SQT1"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(SqError::parse("header", format!("unsupported version {version}")));
        }
        let count = r.u32("section count")?;
        let mut sections = Vec::with_capacity(count.min(1024) as usize);
        for i in 0..count {
            r.context = format!("section {i}");
            let kind = r.u8("section kind")?;
            let name_len = r.u16("section name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "section name")?.to_vec())
                .map_err(|_| SqError::parse(r.context.clone(), "section name is not UTF-8"))?;
            r.context = format!("section '{name}'");
            let payload = match kind {
                KIND_FLOAT => read_float(&mut r)?,
                KIND_SQ => {
                    let weight = read_sq(&mut r)?;
                    let plan = match r.u8("plan flag")? {
                        0 => None,
                        1 => Some(read_plan(&mut r)?),
                        f => return Err(r.error(format!("invalid plan flag {f}"))),
                    };
                    Payload::Sq { weight, plan }
                }
                KIND_PLAN => Payload::Plan(read_plan(&mut r)?),
                KIND_CALIB => Payload::Calib(read_calib(&mut r)?),
                other => return Err(r.error(format!("unknown section kind {other}"))),
            };
            sections.push(Section { name, payload });
        }
        if r.remaining() != 0 {
            return Err(SqError::parse("trailer", format!("{} unexpected trailing bytes", r.remaining())));
        }
        Ok(Self { sections })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn wrong_kind(name: &str, expected: &str, got: &Payload) -> SqError {
    SqError::parse(name, format!("expected a {expected}, found a {}", got.kind_name()))
}

fn too_large<E>(_: E) -> SqError {
    SqError::structure("value too large for the container field")
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_codes(out: &mut Vec<u8>, codes: &[i8]) {
    out.extend(codes.iter().map(|&c| c as u8));
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_float(out: &mut Vec<u8>, m: &Matrix, dtype: FloatDtype) {
    out.push(match dtype {
        FloatDtype::F32 => 0,
        FloatDtype::F64 => 1,
    });
    out.push(2);
    put_u64(out, m.rows() as u64);
    put_u64(out, m.cols() as u64);
    match dtype {
        FloatDtype::F32 => {
            for &v in m.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        FloatDtype::F64 => put_f64s(out, m.as_slice()),
    }
}

fn write_banking(out: &mut Vec<u8>, banking: BankConfig, precision: PrecisionPair) -> Result<()> {
    put_u32(out, u32::try_from(banking.bank_size()).map_err(too_large)?);
    put_u32(out, u32::try_from(banking.n_high()).map_err(too_large)?);
    out.push(precision.high());
    out.push(precision.low());
    Ok(())
}

fn write_sq(out: &mut Vec<u8>, w: &SqWeightMatrix) -> Result<()> {
    write_banking(out, w.banking(), w.precision())?;
    put_u64(out, w.k() as u64);
    put_u64(out, w.n() as u64);
    put_codes(out, w.low_codes());
    put_u64(out, w.high_codes().len() as u64);
    put_codes(out, w.high_codes());
    put_f32s(out, w.scales().high_grid());
    put_f32s(out, w.scales().low_grid());
    Ok(())
}

fn write_plan(out: &mut Vec<u8>, p: &ActivationPlan) -> Result<()> {
    write_banking(out, p.banking(), p.precision())?;
    put_u64(out, p.k() as u64);
    out.extend(p.channel_mask().iter().map(|&m| u8::from(m)));
    for &i in p.perm() {
        put_u32(out, u32::try_from(i).map_err(too_large)?);
    }
    Ok(())
}

fn write_calib(out: &mut Vec<u8>, c: &CalibStats) {
    put_u64(out, c.k() as u64);
    put_u64(out, c.n_samples());
    put_f64s(out, c.amax());
    put_f64s(out, c.channel_sum());
    put_f64s(out, c.hessian().as_slice());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], context: &str) -> Self {
        Self {
            buf,
            pos: 0,
            context: context.to_string(),
        }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn error(&self, msg: impl Into<String>) -> SqError {
        SqError::parse(self.context.clone(), msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.error(format!("{what} {v} does not fit in memory")))
    }

    /// Byte count of `count` elements of `width` bytes, rejecting overflow.
    fn bytes_for(&self, count: usize, width: usize, what: &str) -> Result<usize> {
        count
            .checked_mul(width)
            .ok_or_else(|| self.error(format!("{what} size overflows")))
    }

    fn codes(&mut self, count: usize, what: &str) -> Result<Vec<i8>> {
        Ok(self.take(count, what)?.iter().map(|&b| b as i8).collect())
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let n = self.bytes_for(count, 4, what)?;
        Ok(self
            .take(n, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let n = self.bytes_for(count, 8, what)?;
        Ok(self
            .take(n, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn banking(&mut self) -> Result<(BankConfig, PrecisionPair)> {
        let b = self.u32("bank size")? as usize;
        let n_high = self.u32("high count")? as usize;
        let h = self.u8("h_high")?;
        let l = self.u8("h_low")?;
        let banking = BankConfig::from_counts(b, n_high).map_err(|e| self.error(e.to_string()))?;
        let precision = PrecisionPair::new(h, l).map_err(|e| self.error(e.to_string()))?;
        Ok((banking, precision))
    }
}

fn read_float(r: &mut Reader) -> Result<Payload> {
    let dtype = match r.u8("dtype")? {
        0 => FloatDtype::F32,
        1 => FloatDtype::F64,
        d => return Err(r.error(format!("unknown dtype code {d}"))),
    };
    let ndim = r.u8("ndim")?;
    let (rows, cols) = match ndim {
        1 => (1, r.len("dim 0")?),
        2 => (r.len("dim 0")?, r.len("dim 1")?),
        d => return Err(r.error(format!("only 1-d and 2-d tensors are supported, got {d}-d"))),
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| r.error("tensor size overflows"))?;
    let data = match dtype {
        FloatDtype::F32 => r.f32s(count, "tensor data")?.into_iter().map(f64::from).collect(),
        FloatDtype::F64 => r.f64s(count, "tensor data")?,
    };
    Ok(Payload::Float {
        data: Matrix::from_vec(rows, cols, data)?,
        dtype,
    })
}

fn read_sq(r: &mut Reader) -> Result<SqWeightMatrix> {
    let (banking, precision) = r.banking()?;
    let k = r.len("K")?;
    let n = r.len("N")?;
    let cells = k.checked_mul(n).ok_or_else(|| r.error("K·N overflows"))?;
    let low = r.codes(cells, "low codes")?;
    let high_len = r.len("high code count")?;
    let high = r.codes(high_len, "high codes")?;
    if k % banking.bank_size() != 0 {
        return Err(r.error(format!("bank size {} does not divide K = {k}", banking.bank_size())));
    }
    let groups = k / banking.bank_size() * n;
    let s_high = r.f32s(groups, "high scales")?;
    let s_low = r.f32s(groups, "low scales")?;
    let scales = GroupScales::from_parts(k / banking.bank_size(), n, s_high, s_low)?;
    SqWeightMatrix::from_parts(k, n, banking, precision, low, high, scales)
        .map_err(|e| r.error(format!("invariant check failed: {e}")))
}

fn read_plan(r: &mut Reader) -> Result<ActivationPlan> {
    let (banking, precision) = r.banking()?;
    let k = r.len("plan channel count")?;
    let mask = r
        .take(k, "plan mask")?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(other),
        })
        .collect::<std::result::Result<Vec<bool>, u8>>()
        .map_err(|b| r.error(format!("mask byte {b} is not 0 or 1")))?;
    let n = r.bytes_for(k, 4, "plan permutation")?;
    let perm = r
        .take(n, "plan permutation")?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    ActivationPlan::from_parts(banking, precision, mask, perm)
        .map_err(|e| r.error(format!("invariant check failed: {e}")))
}

fn read_calib(r: &mut Reader) -> Result<CalibStats> {
    let k = r.len("channel count")?;
    let n_samples = r.u64("sample count")?;
    let amax = r.f64s(k, "channel maxima")?;
    let sum = r.f64s(k, "channel sums")?;
    let kk = k.checked_mul(k).ok_or_else(|| r.error("Hessian size overflows"))?;
    let h = Matrix::from_vec(k, k, r.f64s(kk, "Hessian")?)?;
    CalibStats::from_parts(n_samples, amax, sum, h).map_err(|e| r.error(e.to_string()))
}
