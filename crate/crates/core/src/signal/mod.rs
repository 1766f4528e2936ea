//! EEG preprocessing and augmentation.
//!
//! The deployment pipeline is band-pass → notch → resample to 256 Hz →
//! non-overlapping 5 s windows → per-channel IQR normalization. The
//! remaining operations build pre-training targets and views.

pub mod filter;
pub mod resample;

use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::fft::{fft_real, ifft};
use crate::tensor::Matrix;

pub use filter::{Biquad, Cascade};

pub const N_CHANNELS: usize = 22;
pub const WINDOW_SAMPLES: usize = 1280;
pub const TARGET_RATE_HZ: f64 = 256.0;
pub const BANDPASS_HZ: (f64, f64) = (1.0, 75.0);
pub const NOTCH_HZ: f64 = 60.0;
pub const LOWPASS_TARGET_HZ: f64 = 40.0;
pub const IQR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    channels: Vec<Vec<f64>>,
    sample_rate_hz: f64,
}

impl RawRecording {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate_hz: f64) -> Result<Self> {
        if channels.is_empty() {
            bail!(Shape, "recording needs at least one channel");
        }
        let len = channels[0].len();
        if let Some((i, c)) = channels.iter().enumerate().find(|(_, c)| c.len() != len) {
            bail!(Shape, "channel {} has {} samples, channel 0 has {}", i, c.len(), len);
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            bail!(Config, "sample rate must be positive, got {}", sample_rate_hz);
        }
        Ok(Self { channels, sample_rate_hz })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    fn map_channels(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self { channels: self.channels.iter().map(|c| f(c)).collect(), sample_rate_hz: self.sample_rate_hz }
    }
}

/// One model input: channels × samples, plus the sample index it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    data: Matrix,
    source_offset: usize,
}

impl Window {
    pub fn new(data: Matrix, source_offset: usize) -> Result<Self> {
        if !data.all_finite() {
            bail!(Numeric, "window contains non-finite values");
        }
        Ok(Self { data, source_offset })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub fn source_offset(&self) -> usize {
        self.source_offset
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.data.row(c)
    }

    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn samples(&self) -> usize {
        self.data.cols()
    }

    fn map_rows(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Self {
        let mut data = Matrix::zeros(self.data.rows(), self.data.cols());
        for r in 0..self.data.rows() {
            let row = f(r, self.data.row(r));
            data.row_mut(r).copy_from_slice(&row);
        }
        Self { data, source_offset: self.source_offset }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Bandpass,
    Notch,
    LowpassBiquad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub cutoffs_hz: Vec<f64>,
    pub order: usize,
    pub q_factor: f64,
}

impl FilterSpec {
    pub fn bandpass(lo: f64, hi: f64) -> Self {
        Self { kind: FilterKind::Bandpass, cutoffs_hz: alloc::vec![lo, hi], order: 4, q_factor: filter::BUTTERWORTH2_Q }
    }

    pub fn notch(f0: f64) -> Self {
        Self { kind: FilterKind::Notch, cutoffs_hz: alloc::vec![f0], order: 2, q_factor: filter::NOTCH_Q }
    }

    pub fn lowpass_biquad(fc: f64) -> Self {
        Self { kind: FilterKind::LowpassBiquad, cutoffs_hz: alloc::vec![fc], order: 2, q_factor: filter::BUTTERWORTH2_Q }
    }

    /// Builds the section cascade at sample rate `fs`.
    pub fn design(&self, fs: f64) -> Result<Cascade> {
        if self.order == 0 {
            bail!(InvalidFilter, "filter order must be >= 1");
        }
        let want = if self.kind == FilterKind::Bandpass { 2 } else { 1 };
        if self.cutoffs_hz.len() != want {
            bail!(InvalidFilter, "{:?} needs {} cutoff(s), got {}", self.kind, want, self.cutoffs_hz.len());
        }
        let c = &self.cutoffs_hz;
        match self.kind {
            FilterKind::Bandpass => filter::design_bandpass(c[0], c[1], fs),
            FilterKind::Notch => Ok(Cascade::new(alloc::vec![Biquad::notch(c[0], self.q_factor, fs)?])),
            FilterKind::LowpassBiquad => Ok(Cascade::new(alloc::vec![Biquad::lowpass(c[0], self.q_factor, fs)?])),
        }
    }
}

/// Zero-phase band-pass of every channel.
pub fn bandpass(rec: &RawRecording, lo_hz: f64, hi_hz: f64) -> Result<RawRecording> {
    let c = filter::design_bandpass(lo_hz, hi_hz, rec.sample_rate_hz)?;
    Ok(rec.map_channels(|x| c.filtfilt(x)))
}

/// Zero-phase notch of every channel.
pub fn notch(rec: &RawRecording, f0_hz: f64) -> Result<RawRecording> {
    let c = filter::design_notch(f0_hz, rec.sample_rate_hz)?;
    Ok(rec.map_channels(|x| c.filtfilt(x)))
}

pub fn resample(rec: &RawRecording, target_hz: f64) -> Result<RawRecording> {
    if !(target_hz.is_finite() && target_hz > 0.0) {
        bail!(Config, "target rate must be positive, got {}", target_hz);
    }
    let from = rec.sample_rate_hz;
    let channels = rec.channels.iter().map(|c| resample::resample_channel(c, from, target_hz)).collect();
    Ok(RawRecording { channels, sample_rate_hz: target_hz })
}

/// Cuts a 22-channel 256 Hz recording into non-overlapping 1280-sample
/// windows; the trailing remainder is dropped.
pub fn segment(rec: &RawRecording) -> Result<Vec<Window>> {
    if rec.channel_count() != N_CHANNELS {
        bail!(Shape, "expected {} channels, got {}", N_CHANNELS, rec.channel_count());
    }
    if rec.sample_rate_hz != TARGET_RATE_HZ {
        bail!(Config, "segmentation expects {} Hz, got {}", TARGET_RATE_HZ, rec.sample_rate_hz);
    }
    let count = rec.len() / WINDOW_SAMPLES;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * WINDOW_SAMPLES;
        let data = Matrix::from_fn(N_CHANNELS, WINDOW_SAMPLES, |c, t| rec.channels[c][start + t]);
        out.push(Window::new(data, start)?);
    }
    Ok(out)
}

/// Percentile with linear interpolation between closest ranks
/// (`p` in `[0, 100]`).
pub fn percentile(x: &[f64], p: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let h = (s.len() - 1) as f64 * p / 100.0;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// `(q25, q75)` of one channel.
pub fn quartiles(x: &[f64]) -> (f64, f64) {
    (percentile(x, 25.0), percentile(x, 75.0))
}

/// Per-channel quartiles over a whole recording.
pub fn recording_quartiles(rec: &RawRecording) -> Vec<(f64, f64)> {
    rec.channels.iter().map(|c| quartiles(c)).collect()
}

/// `(x - q_lower) / (q_upper - q_lower + 1e-8)` per channel with the given
/// quartiles.
pub fn iqr_normalize_with(w: &Window, q: &[(f64, f64)]) -> Result<Window> {
    if q.len() != w.channels() {
        bail!(Shape, "{} quartile pairs for {} channels", q.len(), w.channels());
    }
    Ok(w.map_rows(|c, x| {
        let (lo, hi) = q[c];
        let d = hi - lo + IQR_EPS;
        x.iter().map(|v| (v - lo) / d).collect()
    }))
}

/// Per-window IQR normalization. Returns the window and the quartiles used.
pub fn iqr_normalize_stats(w: &Window) -> (Window, Vec<(f64, f64)>) {
    let q: Vec<_> = (0..w.channels()).map(|c| quartiles(w.channel(c))).collect();
    let out = iqr_normalize_with(w, &q).expect("quartile count matches");
    (out, q)
}

pub fn iqr_normalize(w: &Window) -> Window {
    iqr_normalize_stats(w).0
}

/// Causal 40 Hz Butterworth biquad at 256 Hz, started from steady state.
pub fn lowpass_target(w: &Window) -> Window {
    let c = filter::design_lowpass_biquad(LOWPASS_TARGET_HZ, TARGET_RATE_HZ).expect("40 Hz is inside (0, 128) Hz");
    w.map_rows(|_, x| {
        let mut y = x.to_vec();
        c.filter(&mut y);
        y
    })
}

/// Randomizes Fourier phases per channel with a conjugate-symmetric
/// perturbation; DC and Nyquist bins are untouched so the result is real.
pub fn ft_surrogate(w: &Window, seed: u64) -> Window {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    w.map_rows(|_, x| {
        let n = x.len();
        let mut spec = fft_real(x);
        for k in 1..n.div_ceil(2) {
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            spec[k] *= Complex64::from_polar(1.0, phi);
            spec[n - k] = spec[k].conj();
        }
        ifft(&mut spec);
        spec.iter().map(|z| z.re).collect()
    })
}

/// Analytic signal of `x` (real part equals `x`).
pub fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut spec = fft_real(x);
    for (k, v) in spec.iter_mut().enumerate() {
        let h = if k == 0 || (n % 2 == 0 && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *v *= h;
    }
    ifft(&mut spec);
    spec
}

/// Shifts every spectral component by `delta_hz` through analytic-signal
/// modulation at 256 Hz.
pub fn frequency_shift(w: &Window, delta_hz: f64) -> Result<Window> {
    if !(delta_hz.is_finite() && delta_hz.abs() < TARGET_RATE_HZ / 4.0) {
        bail!(Config, "frequency shift must satisfy |delta| < {} Hz, got {}", TARGET_RATE_HZ / 4.0, delta_hz);
    }
    Ok(w.map_rows(|_, x| {
        let z = analytic_signal(x);
        z.iter()
            .enumerate()
            .map(|(t, v)| (v * Complex64::from_polar(1.0, 2.0 * PI * delta_hz * t as f64 / TARGET_RATE_HZ)).re)
            .collect()
    }))
}

pub fn add_gaussian_noise(w: &Window, sigma: f64, seed: u64) -> Result<Window> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        bail!(Config, "noise sigma must be >= 0, got {}", sigma);
    }
    if sigma == 0.0 {
        return Ok(w.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| crate::Error::Config(alloc::format!("{e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(w.map_rows(|_, x| x.iter().map(|v| v + normal.sample(&mut rng)).collect()))
}

/// Whether IQR statistics come from each window or the whole recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IqrScope {
    #[default]
    Window,
    Recording,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub bandpass_hz: (f64, f64),
    pub notch_hz: Option<f64>,
    pub target_rate_hz: f64,
    pub iqr_scope: IqrScope,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { bandpass_hz: BANDPASS_HZ, notch_hz: Some(NOTCH_HZ), target_rate_hz: TARGET_RATE_HZ, iqr_scope: IqrScope::Window }
    }
}

/// A normalized window and the per-channel quartiles that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub window: Window,
    pub quartiles: Vec<(f64, f64)>,
}

/// Full deployment preprocessing of one recording.
pub fn preprocess(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<Vec<Prepared>> {
    if rec.channel_count() != N_CHANNELS {
        bail!(Shape, "expected {} channels, got {}", N_CHANNELS, rec.channel_count());
    }
    if rec.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = bandpass(rec, cfg.bandpass_hz.0, cfg.bandpass_hz.1)?;
    if let Some(f0) = cfg.notch_hz {
        r = notch(&r, f0)?;
    }
    let r = resample(&r, cfg.target_rate_hz)?;
    let r = RawRecording { channels: r.channels, sample_rate_hz: TARGET_RATE_HZ };
    let rec_q = match cfg.iqr_scope {
        IqrScope::Recording => Some(recording_quartiles(&r)),
        IqrScope::Window => None,
    };
    segment(&r)?
        .iter()
        .map(|w| match &rec_q {
            Some(q) => Ok(Prepared { window: iqr_normalize_with(w, q)?, quartiles: q.clone() }),
            None => {
                let (window, quartiles) = iqr_normalize_stats(w);
                Ok(Prepared { window, quartiles })
            }
        })
        .collect()
}

/// Magnitude spectrum of a real sequence.
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    fft_real(x).iter().map(|z| z.norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    const FS: f64 = 256.0;

    fn sine(f: f64, fs: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * libm::sin(2.0 * PI * f * i as f64 / fs)).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        libm::sqrt(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
    }

    fn rec1(x: Vec<f64>, fs: f64) -> RawRecording {
        RawRecording::new(vec![x], fs).unwrap()
    }

    fn win(rows: Vec<Vec<f64>>) -> Window {
        let (r, c) = (rows.len(), rows[0].len());
        Window::new(Matrix::from_vec(r, c, rows.concat()).unwrap(), 0).unwrap()
    }

    // interior of a 10 s signal, away from filter edge transients
    fn interior(x: &[f64]) -> &[f64] {
        &x[256..x.len() - 256]
    }

    #[test]
    fn recording_invariants() {
        assert!(RawRecording::new(vec![], 256.0).is_err());
        assert!(RawRecording::new(vec![vec![0.0; 3], vec![0.0; 2]], 256.0).is_err());
        assert!(RawRecording::new(vec![vec![0.0; 3]], 0.0).is_err());
    }

    #[test]
    fn bandpass_rejects_dc() {
        let y = bandpass(&rec1(vec![7.0; 2560], FS), 1.0, 75.0).unwrap();
        assert!(y.channel(0).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn bandpass_keeps_10hz_and_kills_120hz() {
        let y = bandpass(&rec1(sine(10.0, FS, 2560, 1.0), FS), 1.0, 75.0).unwrap();
        let ratio = rms(interior(y.channel(0))) / rms(interior(&sine(10.0, FS, 2560, 1.0)));
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
        // oracle: forward-backward gain is |H|^2 of the designed cascade
        let c = filter::design_bandpass(1.0, 75.0, FS).unwrap();
        assert!((c.response(10.0, FS).norm_sqr() - ratio).abs() < 0.01);

        let x = sine(120.0, FS, 2560, 1.0);
        let y = bandpass(&rec1(x.clone(), FS), 1.0, 75.0).unwrap();
        let db = 20.0 * libm::log10(rms(interior(y.channel(0))) / rms(interior(&x)));
        assert!(db <= -20.0, "{db}");
    }

    #[test]
    fn bandpass_cutoff_errors() {
        let r = rec1(vec![0.0; 10], FS);
        assert!(matches!(bandpass(&r, 1.0, 128.0), Err(crate::Error::InvalidFilter(_))));
        assert!(matches!(bandpass(&r, 0.0, 75.0), Err(crate::Error::InvalidFilter(_))));
        assert!(matches!(notch(&r, 200.0), Err(crate::Error::InvalidFilter(_))));
    }

    #[test]
    fn notch_behaviour() {
        let n = 256 * 30;
        let x = sine(60.0, FS, n, 1.0);
        let y = notch(&rec1(x.clone(), FS), 60.0).unwrap();
        assert!(rms(interior(y.channel(0))) <= 0.03 * rms(&x));
        let x = sine(10.0, FS, n, 1.0);
        let y = notch(&rec1(x.clone(), FS), 60.0).unwrap();
        assert!((rms(interior(y.channel(0))) / rms(interior(&x)) - 1.0).abs() < 0.03);
        let y = notch(&rec1(vec![0.0; 500], FS), 60.0).unwrap();
        assert!(y.channel(0).iter().all(|&v| v == 0.0));
        // attenuation at 60 Hz and the neighbouring bands from the response
        let c = filter::design_notch(60.0, FS).unwrap();
        assert!(10.0 * libm::log10(c.response(60.0 + 1e-3, FS).norm_sqr()) < -30.0);
        for f in [55.0, 50.0, 65.0, 70.0] {
            assert!(10.0 * libm::log10(c.response(f, FS).norm_sqr()) > -3.0);
        }
    }

    #[test]
    fn resample_lengths_and_identity() {
        let x: Vec<f64> = (0..2560).map(|i| libm::sin(i as f64 * 0.01)).collect();
        let y = resample(&rec1(x.clone(), 512.0), 256.0).unwrap();
        assert_eq!(y.len(), 1280);
        let same = resample(&rec1(x.clone(), 256.0), 256.0).unwrap();
        assert_eq!(same.channel(0), &x[..]);
        assert!(resample(&rec1(x, 256.0), 0.0).is_err());
    }

    #[test]
    fn resample_sine_correlation() {
        let x = sine(5.0, 512.0, 2560, 1.0);
        let y = resample(&rec1(x, 512.0), 256.0).unwrap();
        let want = sine(5.0, 256.0, 1280, 1.0);
        let dot: f64 = y.channel(0).iter().zip(&want).map(|(a, b)| a * b).sum();
        let corr = dot / (rms(y.channel(0)) * rms(&want) * 1280.0);
        assert!(corr >= 0.999, "{corr}");
    }

    fn rec22(len: usize) -> RawRecording {
        let ch = (0..N_CHANNELS).map(|c| (0..len).map(|t| (c * 10_000 + t) as f64).collect()).collect();
        RawRecording::new(ch, FS).unwrap()
    }

    #[test]
    fn segment_counts() {
        let w = segment(&rec22(3845)).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.iter().map(|w| w.source_offset()).collect::<Vec<_>>(), vec![0, 1280, 2560]);
        assert!(segment(&rec22(1279)).unwrap().is_empty());
        let one = segment(&rec22(1280)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].source_offset(), 0);
        let bad = RawRecording::new(vec![vec![0.0; 1280]; 3], FS).unwrap();
        assert!(matches!(segment(&bad), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn segment_concatenation_is_prefix() {
        let rec = rec22(4000);
        let ws = segment(&rec).unwrap();
        for c in 0..N_CHANNELS {
            let joined: Vec<f64> = ws.iter().flat_map(|w| w.channel(c).to_vec()).collect();
            assert_eq!(&joined[..], &rec.channel(c)[..joined.len()]);
        }
    }

    #[test]
    fn percentile_linear_interpolation() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quartiles(&x), (1.0, 3.0));
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 25.0), 1.75);
    }

    #[test]
    fn iqr_examples() {
        let w = win(vec![vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![5.0; 5]]);
        let y = iqr_normalize(&w);
        let d = 2.0 + IQR_EPS;
        for (i, v) in y.channel(0).iter().enumerate() {
            assert!((v - (i as f64 - 1.0) / d).abs() < 1e-15);
        }
        assert!(y.channel(1).iter().all(|&v| v == 0.0));
        let q = quartiles(y.channel(0));
        assert!(q.0.abs() < 1e-7 && (q.1 - 1.0).abs() < 1e-7);
    }

    #[test]
    fn lowpass_target_properties() {
        let c = filter::design_lowpass_biquad(LOWPASS_TARGET_HZ, FS).unwrap();
        assert!((c.response(0.0, FS).norm() - 1.0).abs() < 1e-6);
        // monotone attenuation above the cutoff
        let mut prev = c.response(40.0, FS).norm();
        for f in 41..128 {
            let m = c.response(f as f64, FS).norm();
            assert!(m <= prev);
            prev = m;
        }
        let y = lowpass_target(&win(vec![vec![4.25; 1280]]));
        assert!(y.channel(0).iter().all(|v| (v - 4.25).abs() < 1e-9));
        let y = lowpass_target(&win(vec![sine(100.0, FS, 1280, 1.0)]));
        let db = 20.0 * libm::log10(rms(&y.channel(0)[256..]) / rms(&sine(100.0, FS, 1280, 1.0)));
        assert!(db <= -12.0, "{db}");
        let x = sine(5.0, FS, 1280, 1.0);
        let y = lowpass_target(&win(vec![x.clone()]));
        assert!((rms(&y.channel(0)[256..]) / rms(&x[256..]) - 1.0).abs() < 0.02);
    }

    #[test]
    fn surrogate_preserves_magnitudes() {
        let x: Vec<f64> = (0..1280).map(|i| libm::sin(i as f64 * 0.3) + 0.01 * (i % 13) as f64).collect();
        let w = win(vec![x.clone(), sine(7.0, FS, 1280, 3.0)]);
        let s = ft_surrogate(&w, 11);
        for c in 0..2 {
            let a = magnitude_spectrum(w.channel(c));
            let b = magnitude_spectrum(s.channel(c));
            let peak = a.iter().cloned().fold(0.0, f64::max);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-5 * u.max(1e-3 * peak));
            }
        }
        assert_eq!(ft_surrogate(&w, 11), s);
        assert_ne!(ft_surrogate(&w, 12), s);
        let z = ft_surrogate(&win(vec![vec![0.0; 64]]), 3);
        assert!(z.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frequency_shift_moves_peak() {
        let x = sine(10.0, FS, 1280, 1.0);
        let y = frequency_shift(&win(vec![x.clone()]), 2.0).unwrap();
        let m = magnitude_spectrum(y.channel(0));
        let peak = (0..640).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap();
        assert_eq!(peak as f64 * FS / 1280.0, 12.0);
        let same = frequency_shift(&win(vec![x.clone()]), 0.0).unwrap();
        assert!(same.channel(0).iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(frequency_shift(&win(vec![x]), 64.0).is_err());
    }

    #[test]
    fn gaussian_noise_statistics() {
        let w = Window::new(Matrix::zeros(22, 1280), 0).unwrap();
        let y = add_gaussian_noise(&w, 1.0, 5).unwrap();
        let d = y.data().data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = libm::sqrt(d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64);
        assert!(mean.abs() < 0.05 && (0.95..=1.05).contains(&sd));
        assert_eq!(add_gaussian_noise(&w, 1.0, 5).unwrap(), y);
        assert_eq!(add_gaussian_noise(&y, 0.0, 9).unwrap(), y);
        assert!(add_gaussian_noise(&w, -1.0, 0).is_err());
    }

    #[test]
    fn preprocess_pipeline_shapes() {
        let ch: Vec<Vec<f64>> = (0..22).map(|c| sine(5.0 + c as f64, 512.0, 512 * 11, 50.0)).collect();
        let rec = RawRecording::new(ch, 512.0).unwrap();
        let out = preprocess(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].window.source_offset(), 1280);
        assert_eq!(out[0].quartiles.len(), 22);
        let cfg = PreprocessConfig { iqr_scope: IqrScope::Recording, ..Default::default() };
        let rq = preprocess(&rec, &cfg).unwrap();
        assert_eq!(rq[0].quartiles, rq[1].quartiles);
    }

    fn signal_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, n)
    }

    fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * scale)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn filters_are_linear(x in signal_strategy(300), y in signal_strategy(300), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let bp = filter::design_bandpass(1.0, 75.0, FS).unwrap();
            let nt = filter::design_notch(60.0, FS).unwrap();
            let lp = filter::design_lowpass_biquad(40.0, FS).unwrap();
            for c in [&bp, &nt] {
                let lhs = c.filtfilt(&mix);
                let (fx, fy) = (c.filtfilt(&x), c.filtfilt(&y));
                let rhs: Vec<f64> = fx.iter().zip(&fy).map(|(u, v)| a * u + b * v).collect();
                prop_assert!(close(&lhs, &rhs, 1e-6));
            }
            let mut lhs = mix.clone();
            lp.filter(&mut lhs);
            let (mut fx, mut fy) = (x.clone(), y.clone());
            lp.filter(&mut fx);
            lp.filter(&mut fy);
            let rhs: Vec<f64> = fx.iter().zip(&fy).map(|(u, v)| a * u + b * v).collect();
            prop_assert!(close(&lhs, &rhs, 1e-6));
        }

        #[test]
        fn surrogate_parseval(x in signal_strategy(200), seed in any::<u64>()) {
            let w = win(vec![x.clone()]);
            let s = ft_surrogate(&w, seed);
            let e0: f64 = x.iter().map(|v| v * v).sum();
            let e1: f64 = s.channel(0).iter().map(|v| v * v).sum();
            prop_assert!((e0 - e1).abs() <= 1e-5 * e0.max(1e-12));
        }

        #[test]
        fn iqr_fixed_point(mut x in signal_strategy(64)) {
            // rescale so q25 = 0, q75 = 1 exactly, then normalize again
            let (lo, hi) = quartiles(&x);
            prop_assume!(hi - lo > 1e-3);
            for v in x.iter_mut() { *v = (*v - lo) / (hi - lo); }
            let w = win(vec![x.clone()]);
            let y = iqr_normalize(&w);
            prop_assert!(close(y.channel(0), &x, 1e-7));
        }

        #[test]
        fn segment_windows_disjoint(len in 0usize..5000) {
            let ws = segment(&rec22(len)).unwrap();
            prop_assert_eq!(ws.len(), len / WINDOW_SAMPLES);
            for (k, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.source_offset(), k * WINDOW_SAMPLES);
            }
        }
    }
}
