//! Activation statistics and power-of-two scale selection.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::fixed::{pow2, round_half_away};
use crate::model::{forward_with, ActPoint, FembaWeights, Hook};
use crate::tensor::Matrix;

pub const DEFAULT_PERCENTILE: f64 = 99.9;
pub const DEFAULT_MAX_EXPONENT: i32 = 15;

/// Power-of-two activation quantizer with scale `2^-exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pow2ActQuant {
    pub exponent: i32,
    pub bits: u32,
    pub signed: bool,
}

impl Pow2ActQuant {
    pub fn qmax(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    pub fn qmin(&self) -> i64 {
        if self.signed {
            -self.qmax()
        } else {
            0
        }
    }

    pub fn scale(&self) -> f64 {
        pow2(-self.exponent)
    }

    pub fn quantize(&self, a: f64) -> i64 {
        let v = round_half_away(a * pow2(self.exponent));
        if v.is_nan() {
            return 0;
        }
        v.clamp(self.qmin() as f64, self.qmax() as f64) as i64
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        q as f64 * self.scale()
    }

    pub fn fake(&self, a: f64) -> f64 {
        self.dequantize(self.quantize(a))
    }
}

/// Running statistics of one activation tensor.
///
/// The percentile sketch keeps the maximum over observation batches of the
/// batch's exact `percentile` of `|a|`. It is monotone under adding data and
/// invariant under repeating it.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    pub count: u64,
    pub min: f64,
    pub max: f64,
    pub pctl_abs: f64,
    pub percentile: f64,
}

impl CalibStats {
    pub fn new(percentile: f64) -> Self {
        Self { count: 0, min: f64::INFINITY, max: f64::NEG_INFINITY, pctl_abs: 0.0, percentile }
    }

    pub fn observe(&mut self, x: &[f64]) {
        if x.is_empty() {
            return;
        }
        self.count += x.len() as u64;
        for &v in x {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        let mut abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        self.pctl_abs = self.pctl_abs.max(percentile_in_place(&mut abs, self.percentile));
    }
}

/// Linear-interpolation percentile using two selections instead of a sort.
fn percentile_in_place(x: &mut [f64], p: f64) -> f64 {
    let n = x.len();
    let h = (n - 1) as f64 * p / 100.0;
    let lo = libm::floor(h) as usize;
    let frac = h - lo as f64;
    let (_, a, upper) = x.select_nth_unstable_by(lo, |a, b| a.total_cmp(b));
    let a = *a;
    if frac == 0.0 || upper.is_empty() {
        return a;
    }
    let b = upper.iter().cloned().fold(f64::INFINITY, f64::min);
    a + frac * (b - a)
}

/// Largest `n` in `[0, max_exponent]` whose range `qmax·2^-n` still covers
/// the clipping statistic; all-zero statistics give `max_exponent`.
pub fn choose_pow2_scale(stats: &CalibStats, bits: u32, signed: bool, max_exponent: i32) -> Result<Pow2ActQuant> {
    if stats.count == 0 {
        bail!(Calibration, "no activations observed");
    }
    let mut q = Pow2ActQuant { exponent: 0, bits, signed };
    let qmax = q.qmax() as f64;
    let target = stats.pctl_abs;
    let mut n = max_exponent;
    while n > 0 && qmax * pow2(-n) < target {
        n -= 1;
    }
    q.exponent = n;
    Ok(q)
}

/// Exponents for every quantization point.
pub type ActScales = BTreeMap<ActPoint, Pow2ActQuant>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibConfig {
    pub percentile: f64,
    pub max_exponent: i32,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { percentile: DEFAULT_PERCENTILE, max_exponent: DEFAULT_MAX_EXPONENT }
    }
}

struct Recorder {
    stats: BTreeMap<ActPoint, CalibStats>,
    percentile: f64,
}

impl Hook for Recorder {
    fn act(&mut self, point: ActPoint, x: &mut [f64]) {
        let p = self.percentile;
        self.stats.entry(point).or_insert_with(|| CalibStats::new(p)).observe(x);
    }
}

/// Float statistics at every quantization point over `windows`.
pub fn collect_stats(w: &FembaWeights, windows: &[Matrix], cfg: &CalibConfig) -> Result<BTreeMap<ActPoint, CalibStats>> {
    if windows.is_empty() {
        bail!(Calibration, "calibration needs at least one window");
    }
    let mut rec = Recorder { stats: BTreeMap::new(), percentile: cfg.percentile };
    for x in windows {
        forward_with(x, w, &mut rec)?;
    }
    Ok(rec.stats)
}

/// Runs the float model and picks a power-of-two scale per point.
pub fn calibrate(w: &FembaWeights, windows: &[Matrix], cfg: &CalibConfig) -> Result<ActScales> {
    let stats = collect_stats(w, windows, cfg)?;
    stats
        .iter()
        .map(|(p, s)| Ok((*p, choose_pow2_scale(s, p.bits(), true, cfg.max_exponent)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::signal::percentile;
    use proptest::prelude::*;

    fn stats_with(p999: f64) -> CalibStats {
        CalibStats { count: 1, min: -p999, max: p999, pctl_abs: p999, percentile: 99.9 }
    }

    #[test]
    fn scale_examples() {
        assert_eq!(choose_pow2_scale(&stats_with(0.9), 8, true, 15).unwrap().exponent, 7);
        assert_eq!(choose_pow2_scale(&stats_with(127.0), 8, true, 15).unwrap().exponent, 0);
        assert_eq!(choose_pow2_scale(&stats_with(0.0), 8, true, 12).unwrap().exponent, 12);
        assert_eq!(choose_pow2_scale(&stats_with(1e6), 8, true, 15).unwrap().exponent, 0);
        assert!(choose_pow2_scale(&CalibStats::new(99.9), 8, true, 15).is_err());
        let q = Pow2ActQuant { exponent: 2, bits: 8, signed: true };
        assert_eq!(q.quantize(0.75), 3);
        assert_eq!(q.dequantize(3), 0.75);
        assert_eq!(q.quantize(1000.0), 127);
    }

    #[test]
    fn selection_percentile_matches_sorting() {
        let x: Vec<f64> = (0..1001).map(|i| libm::sin(i as f64 * 1.7) * 10.0).collect();
        for p in [0.0, 25.0, 50.0, 99.9, 100.0] {
            let mut a = x.clone();
            assert!((percentile_in_place(&mut a, p) - percentile(&x, p)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_window_gives_max_exponent() {
        let cfg = ModelConfig::micro();
        let w = crate::model::FembaWeights::zeros(&cfg);
        let x = Matrix::zeros(cfg.n_channels, cfg.n_samples);
        let s = calibrate(&w, &[x], &CalibConfig { max_exponent: 11, ..Default::default() }).unwrap();
        assert_eq!(s.len(), ActPoint::all(&cfg).len());
        assert!(s.values().all(|q| q.exponent == 11));
        assert!(calibrate(&w, &[], &CalibConfig::default()).is_err());
    }

    #[test]
    fn duplication_and_superset() {
        let cfg = ModelConfig::micro();
        let w = crate::model::FembaWeights::random(&cfg, 1);
        let win = |s: u64| Matrix::from_fn(cfg.n_channels, cfg.n_samples, |c, t| libm::sin((c * 31 + t) as f64 * 0.1 + s as f64) * (1.0 + s as f64));
        let one = calibrate(&w, &[win(0)], &CalibConfig::default()).unwrap();
        let dup = calibrate(&w, &[win(0), win(0), win(0)], &CalibConfig::default()).unwrap();
        assert_eq!(one, dup);
        let a = collect_stats(&w, &[win(0)], &CalibConfig::default()).unwrap();
        let b = collect_stats(&w, &[win(0), win(3)], &CalibConfig::default()).unwrap();
        for (p, s) in &a {
            assert!(b[p].pctl_abs >= s.pctl_abs);
            assert!(b[p].min <= s.min && b[p].max >= s.max);
        }
        let again = calibrate(&w, &[win(0), win(3)], &CalibConfig::default()).unwrap();
        assert_eq!(again, calibrate(&w, &[win(0), win(3)], &CalibConfig::default()).unwrap());
    }

    proptest! {
        #[test]
        fn chosen_scale_is_tight(p in 1e-6f64..500.0, bits in prop::sample::select(vec![8u32, 16])) {
            let q = choose_pow2_scale(&stats_with(p), bits, true, 15).unwrap();
            let range = q.qmax() as f64 * q.scale();
            if q.exponent > 0 {
                prop_assert!(range >= p);
            }
            if q.exponent < 15 {
                prop_assert!(range / 2.0 < p);
            }
        }

        #[test]
        fn pow2_requant_is_shift(x in -(1i64 << 40)..(1i64 << 40), s in 0u32..24) {
            // power-of-two rescale on the integer path vs the real value
            let want = libm::floor(x as f64 * pow2(-(s as i32)) + 0.5) as i64;
            prop_assert_eq!(crate::fixed::rshift_round(x, s), want);
        }
    }
}
