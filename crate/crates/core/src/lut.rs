//! Linearly interpolated lookup tables for the nonlinearities of the
//! integer path (SiLU and the `exp` used by the scan discretization).
//!
//! Inputs are fixed point with [`LUT_IN_FRAC`] fractional bits; outputs are
//! 16-bit entries with a per-table number of fractional bits (15 for `exp`,
//! which lives in `[0, 1]`; 12 for SiLU, which reaches 8).

use alloc::vec::Vec;

use crate::fixed::{div_round, pow2, round_half_away};

pub const LUT_ENTRIES: usize = 1024;
/// Fractional bits of LUT inputs (Q15.16 in an `i64`).
pub const LUT_IN_FRAC: u32 = 16;

pub const SILU_DOMAIN: (f64, f64) = (-8.0, 8.0);
pub const SILU_OUT_FRAC: u32 = 12;
pub const EXP_DOMAIN: (f64, f64) = (-16.0, 0.0);
pub const EXP_OUT_FRAC: u32 = 15;

/// What to return above `domain_hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Above {
    /// Boundary entry.
    Clamp,
    /// The input shifted to meet the boundary entry (SiLU(x) → x for
    /// large x).
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lut {
    entries: Vec<i16>,
    lo: i64,
    hi: i64,
    out_frac: u32,
    above: Above,
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}


impl Lut {
    pub fn build(f: impl Fn(f64) -> f64, domain: (f64, f64), out_frac: u32, above: Above) -> Self {
        let (lo, hi) = domain;
        let scale = pow2(out_frac as i32);
        let entries = (0..LUT_ENTRIES)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / (LUT_ENTRIES - 1) as f64;
                let v = round_half_away(f(x) * scale);
                v.clamp(i16::MIN as f64, i16::MAX as f64) as i16
            })
            .collect();
        Self {
            entries,
            lo: round_half_away(lo * pow2(LUT_IN_FRAC as i32)) as i64,
            hi: round_half_away(hi * pow2(LUT_IN_FRAC as i32)) as i64,
            out_frac,
            above,
        }
    }

    pub fn silu() -> Self {
        Self::build(silu, SILU_DOMAIN, SILU_OUT_FRAC, Above::Identity)
    }

    pub fn exp() -> Self {
        Self::build(libm::exp, EXP_DOMAIN, EXP_OUT_FRAC, Above::Clamp)
    }

    pub fn entries(&self) -> &[i16] {
        &self.entries
    }

    pub fn out_frac(&self) -> u32 {
        self.out_frac
    }

    pub fn domain(&self) -> (f64, f64) {
        let s = pow2(-(LUT_IN_FRAC as i32));
        (self.lo as f64 * s, self.hi as f64 * s)
    }

    /// Evaluates at `x` (fixed point, [`LUT_IN_FRAC`] fractional bits) and
    /// returns a value with `out_frac` fractional bits.
    pub fn eval(&self, x: i64) -> i32 {
        let last = LUT_ENTRIES - 1;
        if x <= self.lo {
            return self.entries[0] as i32;
        }
        if x >= self.hi {
            return match self.above {
                Above::Clamp => self.entries[last] as i32,
                Above::Identity => {
                    let from = LUT_IN_FRAC as i32;
                    let to = self.out_frac as i32;
                    let v = crate::fixed::align(x, from, to) - crate::fixed::align(self.hi, from, to)
                        + self.entries[last] as i64;
                    v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
                }
            };
        }
        let span = self.hi - self.lo;
        let num = (x - self.lo) * last as i64;
        let idx = (num / span) as usize;
        if idx >= last {
            return self.entries[last] as i32;
        }
        let rem = num % span;
        let e0 = self.entries[idx] as i64;
        let e1 = self.entries[idx + 1] as i64;
        (e0 + div_round((e1 - e0) * rem, span)) as i32
    }

    /// Float convenience wrapper: quantizes `x` to the input grid and returns
    /// the dequantized output.
    pub fn eval_f64(&self, x: f64) -> f64 {
        let xi = round_half_away(x * pow2(LUT_IN_FRAC as i32)) as i64;
        self.eval(xi) as f64 * pow2(-(self.out_frac as i32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_max_err(lut: &Lut, f: impl Fn(f64) -> f64) -> f64 {
        let (lo, hi) = lut.domain();
        let n = 1usize << 16;
        let mut worst = 0.0f64;
        for i in 0..=n {
            let x = lo + (hi - lo) * i as f64 / n as f64;
            // evaluate on the input grid so the oracle sees the same x
            let xi = round_half_away(x * pow2(LUT_IN_FRAC as i32));
            let xg = xi * pow2(-(LUT_IN_FRAC as i32));
            let err = (lut.eval_f64(xg) - f(xg)).abs();
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn silu_at_zero_is_zero() {
        assert_eq!(Lut::silu().eval(0), 0);
    }

    #[test]
    fn exp_at_zero_saturates_to_one() {
        let lut = Lut::exp();
        assert_eq!(lut.eval(0), i16::MAX as i32);
        assert!((lut.eval_f64(0.0) - 1.0).abs() <= pow2(-15));
    }

    #[test]
    fn dense_sweep_error_bound() {
        let bound = pow2(-10);
        assert!(sweep_max_err(&Lut::silu(), silu) <= bound);
        assert!(sweep_max_err(&Lut::exp(), libm::exp) <= bound);
    }

    #[test]
    fn outside_domain() {
        let s = Lut::silu();
        assert_eq!(s.eval_f64(-50.0), s.eval_f64(-8.0));
        assert!((s.eval_f64(20.0) - silu(20.0)).abs() < 4e-3);
        assert!(s.eval_f64(8.5) > s.eval_f64(8.0));
        let e = Lut::exp();
        assert_eq!(e.eval_f64(-40.0), e.eval_f64(-16.0));
        assert_eq!(e.eval(1 << 20), i16::MAX as i32);
    }

    #[test]
    fn entries_monotone() {
        let e = Lut::exp();
        assert!(e.entries().windows(2).all(|w| w[0] <= w[1]));
        // SiLU is monotone above its minimum at x ≈ -1.278
        let s = Lut::silu();
        let start = ((-1.28 - SILU_DOMAIN.0) / 16.0 * 1023.0) as usize + 1;
        assert!(s.entries()[start..].windows(2).all(|w| w[0] <= w[1]));
    }
}
