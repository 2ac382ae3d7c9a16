//! Dyadic rescaling: real ratios approximated as `b / 2^c` and applied to
//! INT32 accumulators with an integer multiply and a rounding right shift.

use crate::tensor::BitWidth;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest exponent a [`DyadicScale`] may carry.
pub const MAX_SHIFT: u32 = 62;
const MANTISSA_BITS: u32 = 31;

#[derive(Debug, Error, PartialEq)]
pub enum DyadicError {
    #[error("cannot form a dyadic scale from {0}: ratio must be positive and finite")]
    Domain(f64),
    #[error("ratio {0} is outside the representable dyadic range")]
    OutOfRange(f64),
}

/// The dyadic number `b / 2^c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DyadicScale {
    #[serde(rename = "b")]
    pub mantissa: i32,
    #[serde(rename = "c")]
    pub shift: u32,
}

impl DyadicScale {
    pub const ONE: DyadicScale = DyadicScale { mantissa: 1, shift: 0 };

    pub fn new(mantissa: i32, shift: u32) -> Self {
        assert!(shift <= MAX_SHIFT, "shift {shift} exceeds {MAX_SHIFT}");
        DyadicScale { mantissa, shift }
    }

    /// The represented value. Only for reporting and tests, never inference.
    pub fn to_f64(self) -> f64 {
        self.mantissa as f64 / (self.shift as f64).exp2()
    }
}

/// Dyadic approximation of a positive ratio with a 31-bit mantissa.
///
/// Inputs that are exactly `k / 2^m` with `k < 2^31` are represented exactly,
/// in lowest terms. Otherwise the relative error is at most `2^-31`.
pub fn dn(x: f64) -> Result<DyadicScale, DyadicError> {
    if !(x.is_finite() && x > 0.0) {
        return Err(DyadicError::Domain(x));
    }
    // x = m * 2^e exactly
    let raw = x.to_bits();
    let exp_field = ((raw >> 52) & 0x7ff) as i64;
    let frac = raw & ((1u64 << 52) - 1);
    let (m, e) = if exp_field == 0 { (frac, -1074i64) } else { (frac | (1u64 << 52), exp_field - 1075) };
    let len = 64 - m.leading_zeros() as i64;

    let mut c = MANTISSA_BITS as i64 - len - e;
    let mut b: u64 = if len > MANTISSA_BITS as i64 {
        round_shift_u64(m, (len - MANTISSA_BITS as i64) as u32)
    } else {
        m << (MANTISSA_BITS as i64 - len)
    };
    if b == 1u64 << MANTISSA_BITS {
        b >>= 1;
        c -= 1;
    }
    if c > MAX_SHIFT as i64 {
        b = round_shift_u64(b, (c - MAX_SHIFT as i64) as u32);
        c = MAX_SHIFT as i64;
        if b == 0 {
            return Err(DyadicError::OutOfRange(x));
        }
    }
    let tz = (b.trailing_zeros() as i64).min(c.max(0));
    b >>= tz;
    c -= tz;
    if c < 0 {
        let widened = b.checked_shl((-c) as u32).filter(|&v| v < 1u64 << MANTISSA_BITS);
        b = widened.ok_or(DyadicError::OutOfRange(x))?;
        c = 0;
    }
    Ok(DyadicScale { mantissa: b as i32, shift: c as u32 })
}

#[inline]
fn round_shift_u64(v: u64, s: u32) -> u64 {
    if s == 0 {
        v
    } else if s >= 64 {
        0
    } else {
        (v >> s) + ((v >> (s - 1)) & 1)
    }
}

/// `round(acc · b / 2^c)` with ties away from zero, as a 64-bit value.
#[inline]
pub fn requantize_wide(acc: i64, s: DyadicScale) -> i64 {
    let prod = acc as i128 * s.mantissa as i128;
    if s.shift == 0 {
        return prod as i64;
    }
    let half = 1i128 << (s.shift - 1);
    let mag = (prod.abs() + half) >> s.shift;
    (if prod < 0 { -mag } else { mag }) as i64
}

/// `round(acc · b / 2^c)` saturated to the INT32 range.
///
/// The product of an INT32 accumulator and a 31-bit mantissa always fits in
/// 64 bits, so no precision is lost before the shift.
#[inline]
pub fn requantize(acc: i32, s: DyadicScale) -> i32 {
    let prod = acc as i64 * s.mantissa as i64;
    let out = if s.shift == 0 {
        prod
    } else {
        let half = 1i64 << (s.shift - 1);
        if prod >= 0 {
            (prod + half) >> s.shift
        } else {
            -((-prod + half) >> s.shift)
        }
    };
    out.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

/// Requantize, offset by the output zero point, then clamp to the code range.
/// With `relu` the lower bound is the zero-point code (the code of real 0).
#[inline]
pub fn requantize_clamped(acc: i32, s: DyadicScale, bits: BitWidth, zero_point: i32, relu: bool) -> i32 {
    clamp_code(requantize(acc, s) as i64 + zero_point as i64, bits, zero_point, relu)
}

#[inline]
pub fn clamp_code(v: i64, bits: BitWidth, zero_point: i32, relu: bool) -> i32 {
    let lo = if relu { zero_point.max(bits.min_code()) } else { bits.min_code() };
    v.clamp(lo as i64, bits.max_code() as i64) as i32
}
