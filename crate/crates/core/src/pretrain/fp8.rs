//! FP8 E4M3 (the "FN" variant) quantize-dequantize emulation.
//!
//! 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits, no infinities,
//! and a single NaN mantissa pattern at exponent 15. Largest finite
//! magnitude is 448; the smallest subnormal is 2⁻⁹.

use crate::tensor::{Scalar, Tensor};

pub const E4M3_MAX: f64 = 448.0;
const MANTISSA_BITS: i32 = 3;
const MIN_NORMAL_EXP: i32 = -6;

/// Rounds `x` to the nearest E4M3 value (ties to even). Magnitudes beyond
/// the largest finite value saturate to ±448; NaN stays NaN.
pub fn quantize(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let mag = x.abs();
    if mag >= E4M3_MAX {
        return E4M3_MAX.copysign(x);
    }
    if mag == 0.0 {
        return x;
    }
    let exp = binary_exponent(mag).max(MIN_NORMAL_EXP);
    let quantum = 2f64.powi(exp - MANTISSA_BITS);
    let q = (mag / quantum).round_ties_even() * quantum;
    q.min(E4M3_MAX).copysign(x)
}

/// `floor(log2(x))` for positive finite `x`, exact.
fn binary_exponent(x: f64) -> i32 {
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal: far below the E4M3 range, any exponent < -6 works.
        return -1074;
    }
    biased - 1023
}

pub fn quantize_scalar<S: Scalar>(x: S) -> S {
    S::cast(quantize(x.as_f64()))
}

pub fn quantize_tensor<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(quantize_scalar)
}

/// Decodes an E4M3 bit pattern. Returns NaN for the two NaN codes.
pub fn decode(code: u8) -> f64 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((code >> 3) & 0x0f) as i32;
    let man = (code & 0x07) as f64;
    if exp == 0x0f && code & 0x07 == 0x07 {
        return f64::NAN;
    }
    let mag = if exp == 0 {
        man / 8.0 * 2f64.powi(MIN_NORMAL_EXP)
    } else {
        (1.0 + man / 8.0) * 2f64.powi(exp - 7)
    };
    sign * mag
}
