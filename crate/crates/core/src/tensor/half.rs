//! IEEE binary16 storage emulation.

use super::Tensor;

/// Rounds `x` to the nearest binary16 value (ties to even) and returns its bit pattern.
/// Magnitudes that round past 65504 become infinity.
pub fn f64_to_f16_bits(x: f64) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 63) as u16) << 15;
    if x.is_nan() {
        return sign | 0x7e00;
    }
    if x.is_infinite() {
        return sign | 0x7c00;
    }
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormals are far below the binary16 range.
        return sign;
    }
    let mut exp = biased - 1023;
    let mant = bits & ((1u64 << 52) - 1);

    if exp > 15 {
        return sign | 0x7c00;
    }
    if exp >= -14 {
        let shift = 42;
        let mut q = mant >> shift;
        let rem = mant & ((1u64 << shift) - 1);
        let half = 1u64 << (shift - 1);
        if rem > half || (rem == half && q & 1 == 1) {
            q += 1;
        }
        if q == 1 << 10 {
            q = 0;
            exp += 1;
            if exp > 15 {
                return sign | 0x7c00;
            }
        }
        return sign | (((exp + 15) as u16) << 10) | q as u16;
    }

    // Subnormal range: count units of 2^-24.
    let full = mant | (1u64 << 52);
    let shift = (28 - exp) as u32;
    if shift >= 64 {
        return sign;
    }
    let mut q = full >> shift;
    let rem = full & ((1u64 << shift) - 1);
    let half = 1u64 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q += 1;
    }
    sign | q as u16
}

pub fn f16_bits_to_f64(h: u16) -> f64 {
    let negative = h & 0x8000 != 0;
    let exp = ((h >> 10) & 0x1f) as i32;
    let mant = (h & 0x3ff) as f64;
    let magnitude = match exp {
        0 => mant * 2f64.powi(-24),
        31 if mant == 0.0 => f64::INFINITY,
        31 => f64::NAN,
        _ => (1.0 + mant / 1024.0) * 2f64.powi(exp - 15),
    };
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

/// Quantizes one value through binary16 and back.
pub fn round_half(x: f64) -> f64 {
    f16_bits_to_f64(f64_to_f16_bits(x))
}

pub fn round_half_slice(values: &mut [f64]) {
    for v in values {
        *v = round_half(*v);
    }
}

/// Quantizes every element of `x` to binary16 and widens it back to 64 bits.
pub fn half_round_trip(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    round_half_slice(out.data_mut());
    out.grad = None;
    out
}
