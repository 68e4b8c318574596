//! IEEE 754 binary16 codec used for token-vector storage.
//!
//! Encoding rounds to nearest, ties to even, directly from `f64`. Values whose
//! magnitude would round past the largest finite half (65504) saturate to it
//! instead of becoming infinite. Subnormals are produced and decoded exactly.

use crate::error::{Error, Result};

/// Largest finite binary16 value.
pub const MAX: f64 = 65504.0;

const MAX_FINITE_BITS: u16 = 0x7BFF;
const EXP_MASK: u16 = 0x7C00;
const MANT_MASK: u16 = 0x03FF;

/// Encodes `x` as a binary16 bit pattern.
pub fn encode(x: f64) -> Result<u16> {
    if x.is_nan() {
        return Err(Error::NanEncode);
    }
    let sign: u16 = if x.is_sign_negative() { 0x8000 } else { 0 };
    let a = x.abs();
    if a.is_infinite() || a >= 65536.0 {
        return Ok(sign | MAX_FINITE_BITS);
    }
    // Below 2^-14 the result is subnormal (or rounds up to the smallest normal,
    // which the integer carry handles). Scaling by 2^24 is exact.
    if a < f64::powi(2.0, -14) {
        let m = (a * f64::powi(2.0, 24)).round_ties_even() as u16;
        return Ok(sign | m);
    }
    let bits = a.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32 - 1023;
    let frac = bits & ((1u64 << 52) - 1);
    let mut mant = (frac >> 42) as u16;
    let rem = frac & ((1u64 << 42) - 1);
    let halfway = 1u64 << 41;
    let mut h = (((exp + 15) as u16) << 10) | mant;
    if rem > halfway || (rem == halfway && mant & 1 == 1) {
        mant += 1;
        h = (((exp + 15) as u16) << 10) + mant;
    }
    if h >= EXP_MASK {
        h = MAX_FINITE_BITS;
    }
    Ok(sign | h)
}

/// Decodes a binary16 bit pattern to its exact real value.
pub fn decode(bits: u16) -> Result<f64> {
    let negative = bits & 0x8000 != 0;
    let exp = (bits & EXP_MASK) >> 10;
    let mant = bits & MANT_MASK;
    let magnitude = match exp {
        0x1f if mant != 0 => return Err(Error::NanDecode(bits)),
        0x1f => f64::INFINITY,
        0 => f64::from(mant) * f64::powi(2.0, -24),
        e => f64::from(0x400 | mant) * f64::powi(2.0, i32::from(e) - 25),
    };
    Ok(if negative { -magnitude } else { magnitude })
}

/// Rounds `x` to the nearest binary16 value and returns it as `f64`.
pub fn quantize(x: f64) -> Result<f64> {
    decode(encode(x)?)
}
