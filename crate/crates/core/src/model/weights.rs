//! Parameter containers, random initialization and flat tensor naming.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Direction, ModelConfig};
use crate::error::{bail, Result};
use crate::tensor::Matrix;

/// Dense layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize, bias: bool) -> Self {
        Self { weight: Matrix::zeros(out, inp), bias: bias.then(|| vec![0.0; out]) }
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    /// Applies the layer to every row of `x`.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let (t, n_in) = x.shape();
        assert_eq!(n_in, self.in_features(), "linear input width");
        let n_out = self.out_features();
        let mut y = Matrix::zeros(t, n_out);
        for r in 0..t {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for (o, yo) in yr.iter_mut().enumerate() {
                let wr = self.weight.row(o);
                let mut acc = 0.0;
                for (a, b) in wr.iter().zip(xr) {
                    acc += a * b;
                }
                *yo = acc + self.bias.as_ref().map_or(0.0, |b| b[o]);
            }
        }
        y
    }

    pub fn bias_or_zero(&self, o: usize) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b[o])
    }

    /// Adds `delta` to the bias, creating it if absent.
    pub fn add_bias(&mut self, delta: &[f64]) {
        let n = self.out_features();
        let b = self.bias.get_or_insert_with(|| vec![0.0; n]);
        for (v, d) in b.iter_mut().zip(delta) {
            *v += d;
        }
    }
}

/// One Mamba branch (the forward or the backward one of a block).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchWeights {
    pub in_proj: Linear,
    /// Depthwise causal kernel, `d_inner × d_conv`; the last tap multiplies
    /// the current sample.
    pub conv: Linear,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: Matrix,
    pub d: Vec<f64>,
    pub out_proj: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub fwd: BranchWeights,
    pub bwd: BranchWeights,
    /// Present only for concat-project fusion.
    pub fuse_proj: Option<Linear>,
}

impl BlockWeights {
    pub fn branch(&self, dir: Direction) -> &BranchWeights {
        match dir {
            Direction::Fwd => &self.fwd,
            Direction::Bwd => &self.bwd,
        }
    }

    pub fn branch_mut(&mut self, dir: Direction) -> &mut BranchWeights {
        match dir {
            Direction::Fwd => &mut self.fwd,
            Direction::Bwd => &mut self.bwd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FembaWeights {
    pub config: ModelConfig,
    /// Patch tokenizer, `(groups·d_model) × (n_channels·patch_size)`.
    pub tokenizer: Linear,
    pub pos_embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub classifier: Linear,
}

/// A named view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

fn branch_zeros(cfg: &ModelConfig) -> BranchWeights {
    let (d, e, n, r) = (cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank);
    BranchWeights {
        in_proj: Linear::zeros(2 * e, d, false),
        conv: Linear::zeros(e, cfg.d_conv, true),
        x_proj: Linear::zeros(r + 2 * n, e, false),
        dt_proj: Linear::zeros(e, r, true),
        a_log: Matrix::zeros(e, n),
        d: vec![0.0; e],
        out_proj: Linear::zeros(d, e, false),
    }
}

fn uniform_linear(rng: &mut ChaCha8Rng, out: usize, inp: usize, bias: bool) -> Linear {
    let k = 1.0 / libm::sqrt(inp as f64);
    let weight = Matrix::from_fn(out, inp, |_, _| rng.random_range(-k..k));
    let bias = bias.then(|| (0..out).map(|_| rng.random_range(-k..k)).collect());
    Linear { weight, bias }
}

impl FembaWeights {
    /// All-zero parameters (no optional biases on the projections).
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        Self {
            config: c.clone(),
            tokenizer: Linear::zeros(c.groups() * c.d_model, c.n_channels * c.patch_size, true),
            pos_embed: Matrix::zeros(c.n_tokens, c.d_model),
            blocks: (0..c.n_blocks)
                .map(|_| BlockWeights {
                    fwd: branch_zeros(c),
                    bwd: branch_zeros(c),
                    fuse_proj: c.fusion.has_projection().then(|| Linear::zeros(c.d_model, 2 * c.d_model, true)),
                })
                .collect(),
            classifier: Linear::zeros(c.n_classes, c.d_model, true),
        }
    }

    /// Deterministic random initialization in the usual Mamba style:
    /// uniform `±1/√fan_in` dense layers, `A_log = log(1..=d_state)`,
    /// `D = 1`, and a Δ bias whose softplus is log-uniform in
    /// `[1e-3, 1e-1]`.
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos_dist = Normal::new(0.0, 0.02).expect("valid normal");
        let tokenizer = uniform_linear(&mut rng, c.groups() * c.d_model, c.n_channels * c.patch_size, true);
        let pos_embed = Matrix::from_fn(c.n_tokens, c.d_model, |_, _| pos_dist.sample(&mut rng));
        let branch = |rng: &mut ChaCha8Rng| {
            let (d, e, n, r) = (c.d_model, c.d_inner, c.d_state, c.dt_rank);
            let in_proj = uniform_linear(rng, 2 * e, d, false);
            let conv = uniform_linear(rng, e, c.d_conv, true);
            let x_proj = uniform_linear(rng, r + 2 * n, e, false);
            let mut dt_proj = uniform_linear(rng, e, r, true);
            let (lo, hi) = (libm::log(1e-3), libm::log(1e-1));
            let dt_bias = (0..e)
                .map(|_| {
                    let dt = libm::exp(rng.random_range(lo..hi));
                    // inverse softplus
                    dt + libm::log(-libm::expm1(-dt))
                })
                .collect();
            dt_proj.bias = Some(dt_bias);
            let a_log = Matrix::from_fn(e, n, |_, s| libm::log((s + 1) as f64));
            let out_proj = uniform_linear(rng, d, e, false);
            BranchWeights { in_proj, conv, x_proj, dt_proj, a_log, d: vec![1.0; e], out_proj }
        };
        let blocks = (0..c.n_blocks)
            .map(|_| {
                let fwd = branch(&mut rng);
                let bwd = branch(&mut rng);
                let fuse_proj = c.fusion.has_projection().then(|| uniform_linear(&mut rng, c.d_model, 2 * c.d_model, true));
                BlockWeights { fwd, bwd, fuse_proj }
            })
            .collect();
        let classifier = uniform_linear(&mut rng, c.n_classes, c.d_model, true);
        Self { config: c.clone(), tokenizer, pos_embed, blocks, classifier }
    }

    /// Every parameter tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        self.visit(&mut |name, dims, data| out.push(NamedTensor { name, dims, data }));
        out
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        fn lin<'a>(f: &mut dyn FnMut(String, Vec<usize>, &'a [f64]), prefix: &str, l: &'a Linear) {
            f(format!("{prefix}.weight"), vec![l.weight.rows(), l.weight.cols()], l.weight.data());
            if let Some(b) = &l.bias {
                f(format!("{prefix}.bias"), vec![b.len()], b);
            }
        }
        lin(f, "tokenizer", &self.tokenizer);
        f("pos_embed".into(), vec![self.pos_embed.rows(), self.pos_embed.cols()], self.pos_embed.data());
        for (i, b) in self.blocks.iter().enumerate() {
            for dir in [Direction::Fwd, Direction::Bwd] {
                let br = b.branch(dir);
                let p = format!("blocks.{i}.{}", dir.name());
                lin(f, &format!("{p}.in_proj"), &br.in_proj);
                lin(f, &format!("{p}.conv"), &br.conv);
                lin(f, &format!("{p}.x_proj"), &br.x_proj);
                lin(f, &format!("{p}.dt_proj"), &br.dt_proj);
                f(format!("{p}.A_log"), vec![br.a_log.rows(), br.a_log.cols()], br.a_log.data());
                f(format!("{p}.D"), vec![br.d.len()], &br.d);
                lin(f, &format!("{p}.out_proj"), &br.out_proj);
            }
            if let Some(fp) = &b.fuse_proj {
                lin(f, &format!("blocks.{i}.fuse_proj"), fp);
            }
        }
        lin(f, "classifier", &self.classifier);
    }

    /// Rebuilds weights from named tensors. `get(name)` returns the flat
    /// data if present; biases may be absent, everything else is required.
    pub fn from_named(config: &ModelConfig, mut get: impl FnMut(&str) -> Option<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let mut w = Self::zeros(config);
        Self::fill(&mut w, config, &mut get)?;
        Ok(w)
    }

    fn fill(w: &mut Self, config: &ModelConfig, get: &mut dyn FnMut(&str) -> Option<Vec<f64>>) -> Result<()> {
        fn take(get: &mut dyn FnMut(&str) -> Option<Vec<f64>>, name: &str, n: usize) -> Result<Vec<f64>> {
            match get(name) {
                Some(v) if v.len() == n => Ok(v),
                Some(v) => bail!(Shape, "tensor {} has {} values, expected {}", name, v.len(), n),
                None => bail!(Shape, "missing tensor {}", name),
            }
        }
        fn lin(get: &mut dyn FnMut(&str) -> Option<Vec<f64>>, prefix: &str, l: &mut Linear) -> Result<()> {
            let (r, c) = l.weight.shape();
            l.weight = Matrix::from_vec(r, c, take(get, &format!("{prefix}.weight"), r * c)?)?;
            let bname = format!("{prefix}.bias");
            l.bias = match get(&bname) {
                Some(b) if b.len() == r => Some(b),
                Some(b) => bail!(Shape, "tensor {} has {} values, expected {}", bname, b.len(), r),
                None => None,
            };
            Ok(())
        }
        lin(get, "tokenizer", &mut w.tokenizer)?;
        let (t, d) = (config.n_tokens, config.d_model);
        w.pos_embed = Matrix::from_vec(t, d, take(get, "pos_embed", t * d)?)?;
        for (i, b) in w.blocks.iter_mut().enumerate() {
            for dir in [Direction::Fwd, Direction::Bwd] {
                let br = b.branch_mut(dir);
                let p = format!("blocks.{i}.{}", dir.name());
                lin(get, &format!("{p}.in_proj"), &mut br.in_proj)?;
                lin(get, &format!("{p}.conv"), &mut br.conv)?;
                lin(get, &format!("{p}.x_proj"), &mut br.x_proj)?;
                lin(get, &format!("{p}.dt_proj"), &mut br.dt_proj)?;
                let (e, n) = br.a_log.shape();
                br.a_log = Matrix::from_vec(e, n, take(get, &format!("{p}.A_log"), e * n)?)?;
                br.d = take(get, &format!("{p}.D"), e)?;
                lin(get, &format!("{p}.out_proj"), &mut br.out_proj)?;
            }
            if let Some(fp) = b.fuse_proj.as_mut() {
                lin(get, &format!("blocks.{i}.fuse_proj"), fp)?;
            }
        }
        lin(get, "classifier", &mut w.classifier)?;
        if !w.all_finite() {
            bail!(Numeric, "checkpoint contains non-finite parameters");
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|t| t.data.len()).sum()
    }
}
