use crate::error::{Result, SqError};

/// Symmetric code range `(−qmax, qmax)` with `qmax = 2^(nbits−1) − 1`.
///
/// The most negative two's-complement pattern is left out of the value range;
/// it serves as the sentinel. `nbits = 0` yields the degenerate `(0, 0)`.
pub fn symmetric_range(nbits: u8) -> (i32, i32) {
    if nbits == 0 {
        return (0, 0);
    }
    let qmax = (1i32 << (nbits - 1)) - 1;
    (-qmax, qmax)
}

/// Code reserved in the low-precision grid to mark a high-precision position.
///
/// This is `−2^(h_low−1)`, the pattern the symmetric range never produces.
/// With `h_low = 0` there is no value range at all and `−1` acts as a plain
/// one-bit marker.
pub fn sentinel_code(low_bits: u8) -> i8 {
    let bits = low_bits.max(1);
    (-(1i32 << (bits - 1))) as i8
}

/// Symmetric per-group quantization.
///
/// `scale = max|v| / qmax` (stored as `f32`), `code = round(v / scale)` with
/// ties away from zero, clamped to the symmetric range. An all-zero group, an
/// empty group or a zero-width range yields scale 0 and all-zero codes.
pub fn quantize_group(values: &[f64], nbits: u8) -> Result<(Vec<i8>, f32)> {
    if nbits > super::MAX_BITS {
        return Err(SqError::param(format!("bit-width {nbits} exceeds 8")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(SqError::CorruptInput(format!(
            "non-finite value {v} in quantization group"
        )));
    }
    let (_, qmax) = symmetric_range(nbits);
    let amax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if qmax == 0 || amax == 0.0 {
        return Ok((vec![0; values.len()], 0.0));
    }
    let scale = (amax / f64::from(qmax)) as f32;
    if !scale.is_finite() {
        return Err(SqError::CorruptInput(format!(
            "group max {amax} overflows an f32 scale"
        )));
    }
    if scale == 0.0 {
        return Ok((vec![0; values.len()], 0.0));
    }
    let codes = values.iter().map(|&v| quantize_value(v, scale, qmax)).collect();
    Ok((codes, scale))
}

#[inline]
pub(crate) fn quantize_value(v: f64, scale: f32, qmax: i32) -> i8 {
    if scale == 0.0 {
        return 0;
    }
    let q = (v / f64::from(scale)).round();
    q.clamp(-f64::from(qmax), f64::from(qmax)) as i8
}
