//! Band-limited resampling with a Kaiser-windowed sinc kernel.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

pub const KAISER_BETA: f64 = 8.0;
pub const ZERO_CROSSINGS: usize = 16;
pub const ROLLOFF: f64 = 0.95;
/// Largest upsampling factor (after reduction) served from a phase table.
const MAX_TABLE_PHASES: u64 = 4096;

/// Modified Bessel function of the first kind, order 0 (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        libm::sin(PI * x) / (PI * x)
    }
}

struct Kernel {
    /// Cutoff as a fraction of the input Nyquist rate.
    fc: f64,
    /// Half-width in input samples.
    half: f64,
    i0_beta: f64,
}

impl Kernel {
    fn new(ratio: f64) -> Self {
        let fc = ROLLOFF * ratio.min(1.0);
        Self { fc, half: ZERO_CROSSINGS as f64 / fc, i0_beta: bessel_i0(KAISER_BETA) }
    }

    fn taps(&self) -> usize {
        libm::ceil(self.half) as usize
    }

    fn at(&self, d: f64) -> f64 {
        let r = d / self.half;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let win = bessel_i0(KAISER_BETA * libm::sqrt(1.0 - r * r)) / self.i0_beta;
        self.fc * sinc(self.fc * d) * win
    }
}

fn reflect(k: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut m = k.rem_euclid(period);
    if m >= n as i64 {
        m = period - m;
    }
    m as usize
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Output length for resampling `n` samples from `from` Hz to `to` Hz.
pub fn output_len(n: usize, from: f64, to: f64) -> usize {
    libm::round(n as f64 * to / from) as usize
}

/// Resamples one channel. Weights are normalized per output sample so a
/// constant input stays constant.
pub fn resample_channel(x: &[f64], from: f64, to: f64) -> Vec<f64> {
    let n = x.len();
    let out_len = output_len(n, from, to);
    if n == 0 || out_len == 0 {
        return Vec::new();
    }
    if from == to {
        return x.to_vec();
    }
    let kernel = Kernel::new(to / from);
    let k = kernel.taps() as i64;
    let integral = libm::trunc(from) == from && libm::trunc(to) == to && from < 1e9 && to < 1e9;
    let (up, down) = if integral {
        let g = gcd(from as u64, to as u64);
        (to as u64 / g, from as u64 / g)
    } else {
        (0, 0)
    };
    let mut out = vec![0.0; out_len];
    if integral && up <= MAX_TABLE_PHASES {
        // phase p covers output times base + p/up
        let table: Vec<Vec<f64>> = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut w: Vec<f64> = (-k + 1..=k).map(|j| kernel.at(frac - j as f64)).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                w
            })
            .collect();
        for (m, o) in out.iter_mut().enumerate() {
            let pos = m as u64 * down;
            let base = (pos / up) as i64;
            let taps = &table[(pos % up) as usize];
            let mut acc = 0.0;
            for (j, w) in (-k + 1..=k).zip(taps) {
                acc += w * x[reflect(base + j, n)];
            }
            *o = acc;
        }
    } else {
        let step = from / to;
        for (m, o) in out.iter_mut().enumerate() {
            let t = m as f64 * step;
            let base = libm::floor(t) as i64;
            let (mut acc, mut norm) = (0.0, 0.0);
            for j in -k + 1..=k {
                let w = kernel.at(t - (base + j) as f64);
                acc += w * x[reflect(base + j, n)];
                norm += w;
            }
            *o = acc / norm;
        }
    }
    out
}
