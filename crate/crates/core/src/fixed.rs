//! Fixed-point primitives shared by the integer engine and its reference.
//!
//! Conventions:
//! * an integer `q` with exponent `n` represents the real value `q * 2^-n`;
//! * requantization rounds half up (`(x + 2^(s-1)) >> s`, arithmetic shift);
//! * float-to-integer quantization rounds half away from zero.

use core::ops::{Add, Mul};

use crate::error::{bail, Result};

/// Symmetric INT8 range; -128 is excluded so negation never overflows.
pub const I8_MAX: i64 = 127;
pub const I8_MIN: i64 = -127;

/// `2^n` as an exact `f64`.
#[inline]
pub fn pow2(n: i32) -> f64 {
    libm::scalbn(1.0, n)
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    libm::round(x)
}

/// Arithmetic right shift with round-half-up. `shift == 0` is the identity.
#[inline]
pub fn rshift_round(x: i64, shift: u32) -> i64 {
    if shift == 0 {
        x
    } else if shift >= 62 {
        let s = shift.min(126);
        ((x as i128 + (1i128 << (s - 1))) >> s) as i64
    } else {
        (x + (1i64 << (shift - 1))) >> shift
    }
}

/// Moves `q` from exponent `from` to exponent `to`, rounding half up when
/// precision is dropped and saturating on the way up.
#[inline]
pub fn align(q: i64, from: i32, to: i32) -> i64 {
    if to >= from {
        let s = (to - from) as u32;
        if s >= 62 {
            return if q == 0 { 0 } else if q > 0 { i64::MAX >> 1 } else { -(i64::MAX >> 1) };
        }
        q.saturating_mul(1i64 << s)
    } else {
        rshift_round(q, (from - to) as u32)
    }
}

#[inline]
pub fn sat_i8(x: i64) -> i8 {
    x.clamp(I8_MIN, I8_MAX) as i8
}

/// Division rounding half away from zero; `den > 0`.
#[inline]
pub fn div_round(num: i64, den: i64) -> i64 {
    if num >= 0 {
        (num + den / 2) / den
    } else {
        -((-num + den / 2) / den)
    }
}

/// Saturates to the INT16 range, reporting whether clipping happened.
#[inline]
pub fn sat_i16(x: i64) -> (i16, bool) {
    if x > i16::MAX as i64 {
        (i16::MAX, true)
    } else if x < i16::MIN as i64 {
        (i16::MIN, true)
    } else {
        (x as i16, false)
    }
}

/// Quantizes a real value to INT8 with power-of-two exponent `n`.
#[inline]
pub fn quantize_i8(x: f64, n: i32) -> i8 {
    let v = round_half_away(x * pow2(n));
    if v.is_nan() {
        return 0;
    }
    v.clamp(I8_MIN as f64, I8_MAX as f64) as i8
}

/// Q15 fixed point: `raw / 2^15`, range `[-1, 1 - 2^-15]`, saturating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(transparent)]
pub struct Q15(pub i16);

impl Q15 {
    pub const FRAC_BITS: u32 = 15;
    pub const ONE_MINUS_LSB: Q15 = Q15(i16::MAX);
    pub const MINUS_ONE: Q15 = Q15(i16::MIN);
    pub const ZERO: Q15 = Q15(0);

    pub fn from_f64(x: f64) -> Self {
        let v = round_half_away(x * pow2(15));
        Q15(v.clamp(i16::MIN as f64, i16::MAX as f64) as i16)
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.0 as f64 / pow2(15)
    }

    #[inline]
    pub fn raw(self) -> i16 {
        self.0
    }

    #[inline]
    pub fn saturating_add(self, other: Q15) -> Q15 {
        Q15(self.0.saturating_add(other.0))
    }
}

/// `(a * b + 2^14) >> 15`, saturated to the Q15 range.
#[inline]
pub fn q15_mul(a: Q15, b: Q15) -> Q15 {
    let p = (a.0 as i32) * (b.0 as i32);
    let r = (p + (1 << 14)) >> 15;
    Q15(r.clamp(i16::MIN as i32, i16::MAX as i32) as i16)
}

impl Mul for Q15 {
    type Output = Q15;
    fn mul(self, rhs: Q15) -> Q15 {
        q15_mul(self, rhs)
    }
}

impl Add for Q15 {
    type Output = Q15;
    fn add(self, rhs: Q15) -> Q15 {
        self.saturating_add(rhs)
    }
}

/// Integer requantization `round_shift(acc * mult, shift)`.
///
/// A pure power-of-two rescale is `mult = 1`; per-channel float scales are
/// carried as a 31-bit mantissa plus shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub mult: i32,
    pub shift: u32,
}

impl Requant {
    pub const fn shift_only(shift: u32) -> Self {
        Self { mult: 1, shift }
    }

    /// Encodes a positive real multiplier `m ≈ mult * 2^-shift` with
    /// `mult` in `[2^30, 2^31)`.
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m.is_finite() && m > 0.0) {
            bail!(Config, "requant multiplier must be positive and finite, got {}", m);
        }
        let (frac, exp) = libm::frexp(m);
        let mut mant = round_half_away(frac * pow2(31)) as i64;
        let mut e = exp;
        if mant == 1i64 << 31 {
            mant >>= 1;
            e += 1;
        }
        let shift = 31 - e;
        if shift < 0 {
            bail!(Config, "requant multiplier {} too large", m);
        }
        if shift > 62 {
            // below half an LSB for any reachable accumulator
            return Ok(Self { mult: 0, shift: 0 });
        }
        Ok(Self { mult: mant as i32, shift: shift as u32 })
    }

    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        let p = acc as i128 * self.mult as i128;
        let r = if self.shift == 0 { p } else { (p + (1i128 << (self.shift - 1))) >> self.shift };
        r.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }

    /// Real value of the multiplier.
    pub fn real(&self) -> f64 {
        self.mult as f64 * pow2(-(self.shift as i32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q15_half_times_half() {
        assert_eq!(q15_mul(Q15(16384), Q15(16384)), Q15(8192));
    }

    #[test]
    fn q15_times_zero() {
        for raw in [-32768i16, -1, 0, 1, 12345, 32767] {
            assert_eq!(q15_mul(Q15(raw), Q15::ZERO), Q15::ZERO);
        }
    }

    #[test]
    fn q15_minus_one_squared_saturates() {
        assert_eq!(q15_mul(Q15::MINUS_ONE, Q15::MINUS_ONE), Q15::ONE_MINUS_LSB);
    }

    #[test]
    fn rshift_round_half_up() {
        assert_eq!(rshift_round(3, 1), 2);
        assert_eq!(rshift_round(-3, 1), -1);
        assert_eq!(rshift_round(20000, 7), 156);
        assert_eq!(rshift_round(-20000, 7), -156);
        assert_eq!(rshift_round(5, 0), 5);
    }

    #[test]
    fn rshift_matches_real_floor_half_up() {
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..1_000_000 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let x = (state as i64) >> 24; // |x| < 2^40, exact in f64
            let s = (state % 20) as u32;
            let expect = libm::floor(x as f64 / pow2(s as i32) + 0.5) as i64;
            assert_eq!(rshift_round(x, s), expect, "x={x} s={s}");
        }
    }

    #[test]
    fn requant_from_real_roundtrip() {
        for m in [1.0, 0.5, 0.0035433, 3.7, 1e-6, 123.25] {
            let r = Requant::from_real(m).unwrap();
            assert!((r.real() - m).abs() <= m * 1e-9, "{m} -> {:?}", r);
        }
        assert!(Requant::from_real(0.0).is_err());
        assert!(Requant::from_real(f64::NAN).is_err());
    }

    #[test]
    fn align_both_directions() {
        assert_eq!(align(3, 2, 4), 12);
        assert_eq!(align(12, 4, 2), 3);
        assert_eq!(align(13, 4, 2), 3);
        assert_eq!(align(14, 4, 2), 4);
    }

    #[test]
    fn quantize_i8_rounds_away_and_clamps() {
        assert_eq!(quantize_i8(0.75, 2), 3);
        assert_eq!(quantize_i8(0.625, 2), 3); // 2.5 -> 3
        assert_eq!(quantize_i8(-0.625, 2), -3);
        assert_eq!(quantize_i8(100.0, 2), 127);
        assert_eq!(quantize_i8(-100.0, 2), -127);
    }
}
