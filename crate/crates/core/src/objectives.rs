//! Patch masking and the training losses: SmoothL1 reconstruction, InfoNCE
//! and focal loss. Every loss returns its value together with the exact
//! gradient of the mean-reduced expression.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::bail;
use crate::tensor::Matrix;
use crate::Result;

/// Patches per pre-training window.
pub const N_PATCHES: usize = 80;
/// Samples per patch.
pub const PATCH_SIZE: usize = 16;
/// Masking ratio range used in pre-training.
pub const RATIO_RANGE: (f64, f64) = (0.5, 0.6);
/// Mean run length of clustered masks, in patches.
pub const MEAN_RUN: f64 = 4.0;
/// Floor applied to the target-class probability in [`focal_loss`].
pub const FOCAL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Random,
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub n_patches: usize,
    pub patch_size: usize,
    pub ratio: f64,
    pub mode: MaskMode,
    pub seed: u64,
}

impl MaskSpec {
    /// Pre-training spec with the ratio drawn uniformly from [`RATIO_RANGE`].
    pub fn pretraining(mode: MaskMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
        let ratio = rng.random_range(RATIO_RANGE.0..=RATIO_RANGE.1);
        Self { n_patches: N_PATCHES, patch_size: PATCH_SIZE, ratio, mode, seed }
    }

    /// Number of masked patches: `round(ratio * n_patches)`.
    pub fn count(&self) -> usize {
        libm::round(self.ratio * self.n_patches as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patches == 0 || self.patch_size == 0 {
            bail!(Config, "mask needs at least one patch of non-zero size");
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            bail!(Config, "mask ratio {} outside [0, 1]", self.ratio);
        }
        Ok(())
    }
}

/// Boolean patch mask (`true` = masked).
///
/// Clustered masks draw run lengths `1 + Geometric(1/MEAN_RUN)`; the last of
/// at most `ceil(count / 4)` runs absorbs the remainder so the count is
/// exact. Gaps between runs are a uniform composition of the free patches.
pub fn gen_mask(spec: &MaskSpec) -> Result<Vec<bool>> {
    spec.validate()?;
    let n = spec.n_patches;
    let count = spec.count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = vec![false; n];
    match spec.mode {
        MaskMode::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            let (chosen, _) = idx.partial_shuffle(&mut rng, count);
            for &i in chosen.iter() {
                mask[i] = true;
            }
        }
        MaskMode::Clustered => {
            if count == 0 {
                return Ok(mask);
            }
            let max_runs = count.div_ceil(4);
            let geo = Geometric::new(1.0 / MEAN_RUN).expect("valid probability");
            let mut runs = Vec::new();
            let mut left = count;
            while left > 0 {
                let len = if runs.len() + 1 == max_runs {
                    left
                } else {
                    (1 + geo.sample(&mut rng) as usize).min(left)
                };
                runs.push(len);
                left -= len;
            }
            // sorted cut points split the free patches into runs.len() + 1 gaps
            let free = n - count;
            let mut cuts: Vec<usize> = (0..runs.len()).map(|_| rng.random_range(0..=free)).collect();
            cuts.sort_unstable();
            let mut pos = 0;
            let mut prev = 0;
            for (len, cut) in runs.iter().zip(&cuts) {
                pos += cut - prev;
                prev = *cut;
                mask[pos..pos + len].iter_mut().for_each(|m| *m = true);
                pos += len;
            }
        }
    }
    Ok(mask)
}

/// Number of maximal runs of `true` in a mask.
pub fn run_count(mask: &[bool]) -> usize {
    mask.iter().enumerate().filter(|&(i, &m)| m && (i == 0 || !mask[i - 1])).count()
}

/// Expands a patch mask to a per-sample mask over `channels` rows of
/// `n_patches * patch_size` samples each.
pub fn sample_mask(patches: &[bool], patch_size: usize, channels: usize) -> Vec<bool> {
    let row: Vec<bool> = patches.iter().flat_map(|&m| core::iter::repeat_n(m, patch_size)).collect();
    (0..channels).flat_map(|_| row.iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossParams {
    pub beta: f64,
    pub unmasked_weight: f64,
    pub tau: f64,
    /// Per-class focal weights; empty means 1 for every class.
    pub alpha: Vec<f64>,
    pub gamma: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { beta: 1.0, unmasked_weight: 0.1, tau: 0.1, alpha: Vec::new(), gamma: 2.0 }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            bail!(Config, "beta must be positive, got {}", self.beta);
        }
        if !(self.tau > 0.0) {
            bail!(Config, "tau must be positive, got {}", self.tau);
        }
        if !(self.gamma >= 0.0) {
            bail!(Config, "gamma must be non-negative, got {}", self.gamma);
        }
        if !(self.unmasked_weight >= 0.0) {
            bail!(Config, "unmasked weight must be non-negative, got {}", self.unmasked_weight);
        }
        if let Some(a) = self.alpha.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            bail!(Config, "alpha {a} outside (0, 1]");
        }
        Ok(())
    }

    fn alpha(&self, class: usize) -> f64 {
        self.alpha.get(class).copied().unwrap_or(1.0)
    }
}

/// Loss value plus gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Weighted SmoothL1 over `pred`, mean-reduced over elements.
///
/// `mask[i]` marks elements of masked patches (weight 1); the rest get
/// `p.unmasked_weight`.
pub fn smooth_l1(pred: &[f64], target: &[f64], p: &LossParams, mask: &[bool]) -> Result<LossGrad> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        bail!(Shape, "smooth_l1: pred {} target {} mask {}", pred.len(), target.len(), mask.len());
    }
    p.validate()?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let w = if mask[i] { 1.0 } else { p.unmasked_weight };
        let d = pred[i] - target[i];
        let (l, g) = if d.abs() < p.beta { (0.5 * d * d / p.beta, d / p.beta) } else { (d.abs() - 0.5 * p.beta, d.signum()) };
        loss += w * l;
        grad[i] = w * g / n;
    }
    Ok(LossGrad { loss: loss / n, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_anchor: Matrix,
    pub d_positive: Matrix,
    pub d_negative: Matrix,
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity and its gradients `(s, ds/da, ds/db)`.
fn cosine(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        bail!(Numeric, "cosine similarity of a zero-norm or non-finite embedding");
    }
    let s = dot(a, b) / (na * nb);
    let da = a.iter().zip(b).map(|(x, y)| y / (na * nb) - s * x / (na * na)).collect();
    let db = a.iter().zip(b).map(|(x, y)| x / (na * nb) - s * y / (nb * nb)).collect();
    Ok((s, da, db))
}

/// InfoNCE with cosine similarity, mean over the batch.
///
/// `anchors` and `positives` are `B x D`; `negatives` is `(B*K) x D` where
/// rows `i*K .. (i+1)*K` belong to anchor `i`. The denominator runs over the
/// positive and the K negatives.
pub fn info_nce(anchors: &Matrix, positives: &Matrix, negatives: &Matrix, tau: f64) -> Result<InfoNceGrad> {
    let (b, d) = anchors.shape();
    if positives.shape() != (b, d) {
        bail!(Shape, "positives {:?} vs anchors {:?}", positives.shape(), anchors.shape());
    }
    if negatives.cols() != d && negatives.rows() != 0 {
        bail!(Shape, "negatives have {} columns, expected {d}", negatives.cols());
    }
    if b == 0 || negatives.rows() % b != 0 {
        bail!(Shape, "{} negatives do not split over a batch of {b}", negatives.rows());
    }
    if !(tau > 0.0) {
        bail!(Config, "tau must be positive, got {tau}");
    }
    let k = negatives.rows() / b;
    let mut d_anchor = Matrix::zeros(b, d);
    let mut d_positive = Matrix::zeros(b, d);
    let mut d_negative = Matrix::zeros(b * k, d);
    let mut total = 0.0;
    for i in 0..b {
        let a = anchors.row(i);
        let mut sims = Vec::with_capacity(k + 1);
        sims.push(cosine(a, positives.row(i))?);
        for j in 0..k {
            sims.push(cosine(a, negatives.row(i * k + j))?);
        }
        let logits: Vec<f64> = sims.iter().map(|s| s.0 / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| libm::exp(l - m)).sum();
        total += m + libm::log(z) - logits[0];
        for (j, (_, da, db)) in sims.iter().enumerate() {
            let soft = libm::exp(logits[j] - m) / z;
            let coef = (soft - if j == 0 { 1.0 } else { 0.0 }) / (tau * b as f64);
            for (g, v) in d_anchor.row_mut(i).iter_mut().zip(da) {
                *g += coef * v;
            }
            let row = if j == 0 { d_positive.row_mut(i) } else { d_negative.row_mut(i * k + j - 1) };
            for (g, v) in row.iter_mut().zip(db) {
                *g += coef * v;
            }
        }
    }
    Ok(InfoNceGrad { loss: total / b as f64, d_anchor, d_positive, d_negative })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalGrad {
    pub loss: f64,
    /// Gradient with respect to `probs`; only target entries are non-zero.
    pub grad: Matrix,
    /// Rows whose target probability was raised to [`FOCAL_EPS`].
    pub clamped: usize,
}

/// Focal loss `-alpha_t (1 - p_t)^gamma log p_t`, mean over the batch.
pub fn focal_loss(probs: &Matrix, labels: &[usize], p: &LossParams) -> Result<FocalGrad> {
    let (b, c) = probs.shape();
    if labels.len() != b {
        bail!(Shape, "{} labels for {b} rows", labels.len());
    }
    if !p.alpha.is_empty() && p.alpha.len() != c {
        bail!(Shape, "{} alpha weights for {c} classes", p.alpha.len());
    }
    p.validate()?;
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    let mut clamped = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            bail!(Shape, "label {y} out of range for {c} classes");
        }
        let raw = probs.get(i, y);
        if !(0.0..=1.0).contains(&raw) {
            bail!(Numeric, "probability {raw} outside [0, 1]");
        }
        let pt = if raw < FOCAL_EPS {
            clamped += 1;
            FOCAL_EPS
        } else {
            raw
        };
        let a = p.alpha(y);
        let q = 1.0 - pt;
        let lp = libm::log(pt);
        loss -= a * libm::pow(q, p.gamma) * lp;
        if raw >= FOCAL_EPS {
            // d/dp of the modulating factor vanishes at q = 0 for every gamma
            let mod_term = if q > 0.0 && p.gamma > 0.0 { p.gamma * libm::pow(q, p.gamma - 1.0) * lp } else { 0.0 };
            let g = a * (mod_term - libm::pow(q, p.gamma) / pt);
            grad.set(i, y, g / b as f64);
        }
    }
    Ok(FocalGrad { loss: loss / b.max(1) as f64, grad, clamped })
}

#[cfg(test)]
mod tests;
