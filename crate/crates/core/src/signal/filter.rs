//! Biquad design (bilinear transform of analog prototypes) and
//! forward/forward-backward application.

use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{bail, Result};

/// Q factors of the two sections of a 4th-order Butterworth prototype.
pub const BUTTERWORTH4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_5];
pub const BUTTERWORTH2_Q: f64 = core::f64::consts::FRAC_1_SQRT_2;
pub const NOTCH_Q: f64 = 30.0;

/// Normalized second-order section, `a0 = 1`.
///
/// `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

fn check_freq(f: f64, fs: f64) -> Result<()> {
    if !(fs.is_finite() && fs > 0.0) {
        bail!(InvalidFilter, "sample rate must be positive, got {}", fs);
    }
    if !(f.is_finite() && f > 0.0 && f < fs / 2.0) {
        bail!(InvalidFilter, "frequency {} Hz outside (0, {}) Hz", f, fs / 2.0);
    }
    Ok(())
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self { b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]], a: [a[1] / a[0], a[2] / a[0]] }
    }

    pub fn lowpass(fc: f64, q: f64, fs: f64) -> Result<Self> {
        check_freq(fc, fs)?;
        let w = 2.0 * PI * fc / fs;
        let (s, c) = (libm::sin(w), libm::cos(w));
        let alpha = s / (2.0 * q);
        let b1 = 1.0 - c;
        Ok(Self::normalized([b1 / 2.0, b1, b1 / 2.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha]))
    }

    pub fn highpass(fc: f64, q: f64, fs: f64) -> Result<Self> {
        check_freq(fc, fs)?;
        let w = 2.0 * PI * fc / fs;
        let (s, c) = (libm::sin(w), libm::cos(w));
        let alpha = s / (2.0 * q);
        let b1 = 1.0 + c;
        Ok(Self::normalized([b1 / 2.0, -b1, b1 / 2.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha]))
    }

    pub fn notch(f0: f64, q: f64, fs: f64) -> Result<Self> {
        check_freq(f0, fs)?;
        let w = 2.0 * PI * f0 / fs;
        let (s, c) = (libm::sin(w), libm::cos(w));
        let alpha = s / (2.0 * q);
        Ok(Self::normalized([1.0, -2.0 * c, 1.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha]))
    }

    /// Complex frequency response at `f` Hz.
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = 1.0 + z1 * self.a[0] + z2 * self.a[1];
        num / den
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form II state for a constant input of 1.
    fn steady_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = g - self.b[0];
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z[0];
            z[0] = b1 * xin - a1 * y + z[1];
            z[1] = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    sections: Vec<Biquad>,
}

impl Cascade {
    pub fn new(sections: Vec<Biquad>) -> Self {
        Self { sections }
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(f, fs))
    }

    /// Causal filtering, state initialized to the steady state of a constant
    /// input equal to `x[0]`.
    pub fn filter(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let mut level = first;
        for s in &self.sections {
            let [z1, z2] = s.steady_state();
            s.run(x, [z1 * level, z2 * level]);
            level *= s.dc_gain();
        }
    }

    /// Zero-phase forward-backward filtering with odd reflection padding of
    /// three times the filter order.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * self.order()).min(n - 1);
        let mut buf = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            buf.push(2.0 * x[0] - x[i]);
        }
        buf.extend_from_slice(x);
        for i in 1..=pad {
            buf.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        self.filter(&mut buf);
        buf.reverse();
        self.filter(&mut buf);
        buf.reverse();
        buf.drain(..pad);
        buf.truncate(n);
        buf
    }
}

/// 4th-order Butterworth high-pass at `lo` cascaded with a 4th-order
/// Butterworth low-pass at `hi`.
pub fn design_bandpass(lo: f64, hi: f64, fs: f64) -> Result<Cascade> {
    check_freq(lo, fs)?;
    check_freq(hi, fs)?;
    if lo >= hi {
        bail!(InvalidFilter, "band-pass needs lo < hi, got {} >= {}", lo, hi);
    }
    let mut sections = Vec::with_capacity(4);
    for q in BUTTERWORTH4_Q {
        sections.push(Biquad::highpass(lo, q, fs)?);
    }
    for q in BUTTERWORTH4_Q {
        sections.push(Biquad::lowpass(hi, q, fs)?);
    }
    Ok(Cascade::new(sections))
}

pub fn design_notch(f0: f64, fs: f64) -> Result<Cascade> {
    Ok(Cascade::new(alloc::vec![Biquad::notch(f0, NOTCH_Q, fs)?]))
}

pub fn design_lowpass_biquad(fc: f64, fs: f64) -> Result<Cascade> {
    Ok(Cascade::new(alloc::vec![Biquad::lowpass(fc, BUTTERWORTH2_Q, fs)?]))
}
