//! Float reference of the encoder: patch tokenizer, bidirectional Mamba
//! blocks with residuals, mean pooling and a linear head.
//!
//! Every forward entry point has a `*_with` twin taking a [`Hook`], which
//! sees each activation at its quantization point and each dense layer's
//! input and output. Calibration, fake quantization and bias correction are
//! all expressed as hooks over this one implementation.

mod weights;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use weights::{BlockWeights, BranchWeights, FembaWeights, Linear, NamedTensor};

use crate::error::{bail, Result};
use crate::lut::{silu, softplus};
use crate::tensor::Matrix;

pub const DT_MIN: f64 = 1e-4;
pub const DT_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Fusion {
    #[default]
    Sum,
    Mean,
    ConcatProject,
}

impl Fusion {
    pub fn code(self) -> i32 {
        match self {
            Fusion::Sum => 0,
            Fusion::Mean => 1,
            Fusion::ConcatProject => 2,
        }
    }

    pub fn from_code(c: i32) -> Result<Self> {
        Ok(match c {
            0 => Fusion::Sum,
            1 => Fusion::Mean,
            2 => Fusion::ConcatProject,
            _ => bail!(Config, "unknown fusion code {}", c),
        })
    }

    pub fn has_projection(self) -> bool {
        self == Fusion::ConcatProject
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Fwd,
    Bwd,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Fwd, Direction::Bwd];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Fwd => "fwd",
            Direction::Bwd => "bwd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
    pub n_blocks: usize,
    pub n_tokens: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub patch_size: usize,
    pub n_classes: usize,
    pub fusion: Fusion,
}

impl ModelConfig {
    /// The deployed Tiny shapes: 385-wide tokens, 1540 inner channels,
    /// 160 tokens from a 22 × 1280 window.
    pub fn femba_tiny(n_classes: usize) -> Self {
        Self {
            d_model: 385,
            d_inner: 1540,
            d_state: 16,
            d_conv: 4,
            dt_rank: 25,
            n_blocks: 2,
            n_tokens: 160,
            n_channels: 22,
            n_samples: 1280,
            patch_size: 16,
            n_classes,
            fusion: Fusion::Sum,
        }
    }

    /// A miniature configuration with the same topology, for tests and
    /// desk-scale experiments.
    pub fn micro() -> Self {
        Self {
            d_model: 8,
            d_inner: 16,
            d_state: 4,
            d_conv: 4,
            dt_rank: 2,
            n_blocks: 2,
            n_tokens: 8,
            n_channels: 3,
            n_samples: 32,
            patch_size: 8,
            n_classes: 3,
            fusion: Fusion::Sum,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.n_samples / self.patch_size
    }

    /// Tokens produced per temporal patch.
    pub fn groups(&self) -> usize {
        self.n_tokens / self.n_patches()
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("dt_rank", self.dt_rank),
            ("n_tokens", self.n_tokens),
            ("n_channels", self.n_channels),
            ("n_samples", self.n_samples),
            ("patch_size", self.patch_size),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "{} must be positive", name);
        }
        if self.n_samples % self.patch_size != 0 {
            bail!(Config, "n_samples {} not divisible by patch_size {}", self.n_samples, self.patch_size);
        }
        if self.n_tokens % self.n_patches() != 0 {
            bail!(Config, "n_tokens {} not a multiple of the {} patches", self.n_tokens, self.n_patches());
        }
        Ok(())
    }

    /// Flat integer encoding used by the container metadata entry.
    pub fn to_ints(&self) -> Vec<i32> {
        [
            self.d_model,
            self.d_inner,
            self.d_state,
            self.d_conv,
            self.dt_rank,
            self.n_blocks,
            self.n_tokens,
            self.n_channels,
            self.n_samples,
            self.patch_size,
            self.n_classes,
        ]
        .iter()
        .map(|&v| v as i32)
        .chain(core::iter::once(self.fusion.code()))
        .collect()
    }

    pub fn from_ints(v: &[i32]) -> Result<Self> {
        if v.len() != 12 || v[..11].iter().any(|&x| x < 0) {
            bail!(Config, "model config needs 12 non-negative integers, got {:?}", v);
        }
        let u = |i: usize| v[i] as usize;
        let cfg = Self {
            d_model: u(0),
            d_inner: u(1),
            d_state: u(2),
            d_conv: u(3),
            dt_rank: u(4),
            n_blocks: u(5),
            n_tokens: u(6),
            n_channels: u(7),
            n_samples: u(8),
            patch_size: u(9),
            n_classes: u(10),
            fusion: Fusion::from_code(v[11])?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Activation sites inside one branch, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchPoint {
    /// `in_proj` output (both halves).
    Xz,
    /// Depthwise conv output, before SiLU.
    Conv,
    /// SiLU of the conv output; the scan input.
    U,
    /// `x_proj` output: Δ-rank features, B and C.
    XDbl,
    /// `dt_proj` output, before softplus.
    DtPre,
    /// Scan hidden state.
    State,
    /// Scan output `C·h + D·u`.
    Y,
    /// SiLU of the gate half.
    Gate,
    Gated,
    /// `out_proj` output.
    Out,
}

impl BranchPoint {
    pub const ALL: [BranchPoint; 10] = [
        BranchPoint::Xz,
        BranchPoint::Conv,
        BranchPoint::U,
        BranchPoint::XDbl,
        BranchPoint::DtPre,
        BranchPoint::State,
        BranchPoint::Y,
        BranchPoint::Gate,
        BranchPoint::Gated,
        BranchPoint::Out,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BranchPoint::Xz => "xz",
            BranchPoint::Conv => "conv",
            BranchPoint::U => "u",
            BranchPoint::XDbl => "x_dbl",
            BranchPoint::DtPre => "dt",
            BranchPoint::State => "h",
            BranchPoint::Y => "y",
            BranchPoint::Gate => "gate",
            BranchPoint::Gated => "gated",
            BranchPoint::Out => "out",
        }
    }
}

/// A quantization point of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActPoint {
    Input,
    Tokens,
    Branch { block: usize, dir: Direction, point: BranchPoint },
    Fused(usize),
    BlockOut(usize),
    Pooled,
}

impl ActPoint {
    pub fn name(&self) -> String {
        match self {
            ActPoint::Input => "input".into(),
            ActPoint::Tokens => "tokens".into(),
            ActPoint::Branch { block, dir, point } => format!("blocks.{block}.{}.{}", dir.name(), point.name()),
            ActPoint::Fused(b) => format!("blocks.{b}.fused"),
            ActPoint::BlockOut(b) => format!("blocks.{b}.out"),
            ActPoint::Pooled => "pooled".into(),
        }
    }

    /// Bit width of the integer representation at this point.
    pub fn bits(&self) -> u32 {
        match self {
            ActPoint::Branch { point: BranchPoint::State, .. } => 16,
            _ => 8,
        }
    }

    /// All points of a configuration in evaluation order.
    pub fn all(cfg: &ModelConfig) -> Vec<ActPoint> {
        let mut v = vec![ActPoint::Input, ActPoint::Tokens];
        for block in 0..cfg.n_blocks {
            for dir in Direction::BOTH {
                v.extend(BranchPoint::ALL.iter().map(|&point| ActPoint::Branch { block, dir, point }));
            }
            v.push(ActPoint::Fused(block));
            v.push(ActPoint::BlockOut(block));
        }
        v.push(ActPoint::Pooled);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchLayer {
    InProj,
    Conv,
    XProj,
    DtProj,
    OutProj,
}

impl BranchLayer {
    pub const ALL: [BranchLayer; 5] =
        [BranchLayer::InProj, BranchLayer::Conv, BranchLayer::XProj, BranchLayer::DtProj, BranchLayer::OutProj];

    pub fn name(self) -> &'static str {
        match self {
            BranchLayer::InProj => "in_proj",
            BranchLayer::Conv => "conv",
            BranchLayer::XProj => "x_proj",
            BranchLayer::DtProj => "dt_proj",
            BranchLayer::OutProj => "out_proj",
        }
    }
}

/// A layer with a weight matrix and an optional bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Tokenizer,
    Branch { block: usize, dir: Direction, layer: BranchLayer },
    FuseProj(usize),
    Classifier,
}

impl LayerId {
    pub fn name(&self) -> String {
        match self {
            LayerId::Tokenizer => "tokenizer".into(),
            LayerId::Branch { block, dir, layer } => format!("blocks.{block}.{}.{}", dir.name(), layer.name()),
            LayerId::FuseProj(b) => format!("blocks.{b}.fuse_proj"),
            LayerId::Classifier => "classifier".into(),
        }
    }

    /// All layers in evaluation order.
    pub fn all(cfg: &ModelConfig) -> Vec<LayerId> {
        let mut v = vec![LayerId::Tokenizer];
        for block in 0..cfg.n_blocks {
            for dir in Direction::BOTH {
                v.extend(BranchLayer::ALL.iter().map(|&layer| LayerId::Branch { block, dir, layer }));
            }
            if cfg.fusion.has_projection() {
                v.push(LayerId::FuseProj(block));
            }
        }
        v.push(LayerId::Classifier);
        v
    }

    pub fn get<'a>(&self, w: &'a FembaWeights) -> &'a Linear {
        match *self {
            LayerId::Tokenizer => &w.tokenizer,
            LayerId::Branch { block, dir, layer } => {
                let br = w.blocks[block].branch(dir);
                match layer {
                    BranchLayer::InProj => &br.in_proj,
                    BranchLayer::Conv => &br.conv,
                    BranchLayer::XProj => &br.x_proj,
                    BranchLayer::DtProj => &br.dt_proj,
                    BranchLayer::OutProj => &br.out_proj,
                }
            }
            LayerId::FuseProj(b) => w.blocks[b].fuse_proj.as_ref().expect("fusion projection present"),
            LayerId::Classifier => &w.classifier,
        }
    }

    pub fn get_mut<'a>(&self, w: &'a mut FembaWeights) -> &'a mut Linear {
        match *self {
            LayerId::Tokenizer => &mut w.tokenizer,
            LayerId::Branch { block, dir, layer } => {
                let br = w.blocks[block].branch_mut(dir);
                match layer {
                    BranchLayer::InProj => &mut br.in_proj,
                    BranchLayer::Conv => &mut br.conv,
                    BranchLayer::XProj => &mut br.x_proj,
                    BranchLayer::DtProj => &mut br.dt_proj,
                    BranchLayer::OutProj => &mut br.out_proj,
                }
            }
            LayerId::FuseProj(b) => w.blocks[b].fuse_proj.as_mut().expect("fusion projection present"),
            LayerId::Classifier => &mut w.classifier,
        }
    }

    /// Applies the layer the way the forward pass does (depthwise causal
    /// for the conv, dense otherwise).
    pub fn apply(&self, w: &FembaWeights, input: &Matrix) -> Matrix {
        let l = self.get(w);
        match self {
            LayerId::Branch { layer: BranchLayer::Conv, .. } => depthwise_causal_conv(input, l),
            _ => l.forward(input),
        }
    }
}

/// Observer/mutator of intermediate values.
pub trait Hook {
    fn act(&mut self, _point: ActPoint, _x: &mut [f64]) {}
    /// Called with a layer's input and pre-activation output.
    fn linear(&mut self, _layer: LayerId, _input: &Matrix, _output: &mut Matrix) {}
}

/// The plain float forward pass.
pub struct NoHook;

impl Hook for NoHook {}

/// Rearranges a `n_channels × n_samples` window into one row per temporal
/// patch, channel-major within the row.
pub fn patches(x: &Matrix, cfg: &ModelConfig) -> Matrix {
    let ps = cfg.patch_size;
    Matrix::from_fn(cfg.n_patches(), cfg.n_channels * ps, |p, i| x.get(i / ps, p * ps + i % ps))
}

fn check_window(x: &Matrix, cfg: &ModelConfig) -> Result<()> {
    if x.shape() != (cfg.n_channels, cfg.n_samples) {
        bail!(Shape, "window is {:?}, model expects ({}, {})", x.shape(), cfg.n_channels, cfg.n_samples);
    }
    Ok(())
}

pub fn tokenize(x: &Matrix, w: &FembaWeights) -> Result<Matrix> {
    tokenize_with(x, w, &mut NoHook)
}

/// Token `p·groups + g` is feature group `g` of patch `p`, plus its
/// positional embedding.
pub fn tokenize_with(x: &Matrix, w: &FembaWeights, hook: &mut dyn Hook) -> Result<Matrix> {
    let cfg = &w.config;
    check_window(x, cfg)?;
    let p = patches(x, cfg);
    let mut y = w.tokenizer.forward(&p);
    hook.linear(LayerId::Tokenizer, &p, &mut y);
    let (g, d) = (cfg.groups(), cfg.d_model);
    let mut tokens = Matrix::from_fn(cfg.n_tokens, d, |t, j| y.get(t / g, (t % g) * d + j) + w.pos_embed.get(t, j));
    hook.act(ActPoint::Tokens, tokens.data_mut());
    Ok(tokens)
}

/// Per-channel causal FIR: `out[t][e] = b[e] + Σ_k W[e][k]·x[t-K+1+k][e]`.
pub fn depthwise_causal_conv(x: &Matrix, conv: &Linear) -> Matrix {
    let (t_len, e_len) = x.shape();
    let k_len = conv.in_features();
    Matrix::from_fn(t_len, e_len, |t, e| {
        let mut acc = conv.bias_or_zero(e);
        for k in 0..k_len {
            let src = t as isize - (k_len - 1 - k) as isize;
            if src >= 0 {
                acc += conv.weight.get(e, k) * x.get(src as usize, e);
            }
        }
        acc
    })
}

/// Real state matrix `A = -exp(A_log)`.
pub fn a_from_log(a_log: &Matrix) -> Matrix {
    Matrix::from_fn(a_log.rows(), a_log.cols(), |e, s| -libm::exp(a_log.get(e, s)))
}

/// Selective scan over `T` steps and `E` channels with `N` states:
/// `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t u_t`, `y_t = C_t·h_t + D u_t`.
///
/// Shapes: `u, delta: T × E`, `a: E × N`, `b, c: T × N`, `d: E`.
pub fn selective_scan(u: &Matrix, delta: &Matrix, a: &Matrix, b: &Matrix, c: &Matrix, d: &[f64]) -> Result<Matrix> {
    let (t, e) = u.shape();
    let n = a.cols();
    if delta.shape() != (t, e) || a.rows() != e || b.shape() != (t, n) || c.shape() != (t, n) || d.len() != e {
        bail!(Shape, "inconsistent scan operand shapes");
    }
    let finite = [u, delta, a, b, c].iter().all(|m| m.all_finite()) && d.iter().all(|v| v.is_finite());
    if !finite {
        bail!(Numeric, "non-finite scan parameter");
    }
    if delta.data().iter().any(|&v| v <= 0.0) {
        bail!(Numeric, "scan step sizes must be positive");
    }
    Ok(scan_with(u, delta, a, b, c, d, &mut |_| {}))
}

fn scan_with(
    u: &Matrix,
    delta: &Matrix,
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    d: &[f64],
    on_state: &mut dyn FnMut(&mut [f64]),
) -> Matrix {
    let (t_len, e_len) = u.shape();
    let n = a.cols();
    let mut h = vec![0.0; e_len * n];
    let mut y = Matrix::zeros(t_len, e_len);
    for t in 0..t_len {
        for e in 0..e_len {
            let dt = delta.get(t, e);
            let ut = u.get(t, e);
            for s in 0..n {
                let hs = &mut h[e * n + s];
                *hs = libm::exp(dt * a.get(e, s)) * *hs + dt * b.get(t, s) * ut;
            }
        }
        on_state(&mut h);
        for e in 0..e_len {
            let mut acc = d[e] * u.get(t, e);
            for s in 0..n {
                acc += c.get(t, s) * h[e * n + s];
            }
            y.set(t, e, acc);
        }
    }
    y
}

pub fn mamba_branch(tokens: &Matrix, bw: &BranchWeights, dir: Direction) -> Matrix {
    branch_with(tokens, bw, 0, dir, &mut NoHook)
}

/// One Mamba branch; `block` only labels hook callbacks.
pub fn branch_with(tokens: &Matrix, bw: &BranchWeights, block: usize, dir: Direction, hook: &mut dyn Hook) -> Matrix {
    let pt = |point| ActPoint::Branch { block, dir, point };
    let ly = |layer| LayerId::Branch { block, dir, layer };
    let x = match dir {
        Direction::Fwd => tokens.clone(),
        Direction::Bwd => tokens.reversed_rows(),
    };
    let e = bw.in_proj.out_features() / 2;
    let n = bw.a_log.cols();
    let r = bw.dt_proj.in_features();

    let mut xz = bw.in_proj.forward(&x);
    hook.linear(ly(BranchLayer::InProj), &x, &mut xz);
    hook.act(pt(BranchPoint::Xz), xz.data_mut());
    let x_in = xz.columns(0, e);
    let z = xz.columns(e, 2 * e);

    let mut conv = depthwise_causal_conv(&x_in, &bw.conv);
    hook.linear(ly(BranchLayer::Conv), &x_in, &mut conv);
    hook.act(pt(BranchPoint::Conv), conv.data_mut());
    let mut u = conv;
    u.data_mut().iter_mut().for_each(|v| *v = silu(*v));
    hook.act(pt(BranchPoint::U), u.data_mut());

    let mut xdbl = bw.x_proj.forward(&u);
    hook.linear(ly(BranchLayer::XProj), &u, &mut xdbl);
    hook.act(pt(BranchPoint::XDbl), xdbl.data_mut());
    let dt_in = xdbl.columns(0, r);
    let bm = xdbl.columns(r, r + n);
    let cm = xdbl.columns(r + n, r + 2 * n);

    let mut dt = bw.dt_proj.forward(&dt_in);
    hook.linear(ly(BranchLayer::DtProj), &dt_in, &mut dt);
    hook.act(pt(BranchPoint::DtPre), dt.data_mut());
    dt.data_mut().iter_mut().for_each(|v| *v = softplus(*v).clamp(DT_MIN, DT_MAX));

    let a = a_from_log(&bw.a_log);
    let mut y = scan_with(&u, &dt, &a, &bm, &cm, &bw.d, &mut |h| hook.act(pt(BranchPoint::State), h));
    hook.act(pt(BranchPoint::Y), y.data_mut());

    let mut gate = z;
    gate.data_mut().iter_mut().for_each(|v| *v = silu(*v));
    hook.act(pt(BranchPoint::Gate), gate.data_mut());
    for (yv, g) in y.data_mut().iter_mut().zip(gate.data()) {
        *yv *= g;
    }
    hook.act(pt(BranchPoint::Gated), y.data_mut());

    let mut out = bw.out_proj.forward(&y);
    hook.linear(ly(BranchLayer::OutProj), &y, &mut out);
    hook.act(pt(BranchPoint::Out), out.data_mut());
    match dir {
        Direction::Fwd => out,
        Direction::Bwd => out.reversed_rows(),
    }
}

/// `tokens + fuse(fwd(tokens), bwd(tokens))`.
pub fn bi_mamba_block(tokens: &Matrix, bw: &BlockWeights, fusion: Fusion) -> Matrix {
    block_with(tokens, bw, fusion, 0, &mut NoHook)
}

pub fn block_with(tokens: &Matrix, bw: &BlockWeights, fusion: Fusion, block: usize, hook: &mut dyn Hook) -> Matrix {
    let f = branch_with(tokens, &bw.fwd, block, Direction::Fwd, hook);
    let b = branch_with(tokens, &bw.bwd, block, Direction::Bwd, hook);
    let mut fused = match fusion {
        Fusion::Sum => Matrix::from_fn(f.rows(), f.cols(), |t, j| f.get(t, j) + b.get(t, j)),
        Fusion::Mean => Matrix::from_fn(f.rows(), f.cols(), |t, j| (f.get(t, j) + b.get(t, j)) * 0.5),
        Fusion::ConcatProject => {
            let d = f.cols();
            let cat = Matrix::from_fn(f.rows(), 2 * d, |t, j| if j < d { f.get(t, j) } else { b.get(t, j - d) });
            let proj = bw.fuse_proj.as_ref().expect("concat-project fusion needs fuse_proj");
            let mut y = proj.forward(&cat);
            hook.linear(LayerId::FuseProj(block), &cat, &mut y);
            y
        }
    };
    hook.act(ActPoint::Fused(block), fused.data_mut());
    let mut out = Matrix::from_fn(tokens.rows(), tokens.cols(), |t, j| tokens.get(t, j) + fused.get(t, j));
    hook.act(ActPoint::BlockOut(block), out.data_mut());
    out
}

pub fn forward(x: &Matrix, w: &FembaWeights) -> Result<Vec<f64>> {
    forward_with(x, w, &mut NoHook)
}

pub fn forward_with(x: &Matrix, w: &FembaWeights, hook: &mut dyn Hook) -> Result<Vec<f64>> {
    let cfg = &w.config;
    check_window(x, cfg)?;
    let mut input = x.clone();
    hook.act(ActPoint::Input, input.data_mut());
    let mut tokens = tokenize_with(&input, w, hook)?;
    for (i, bw) in w.blocks.iter().enumerate() {
        tokens = block_with(&tokens, bw, cfg.fusion, i, hook);
    }
    let t = tokens.rows() as f64;
    let mut pooled = Matrix::from_fn(1, cfg.d_model, |_, j| (0..tokens.rows()).map(|r| tokens.get(r, j)).sum::<f64>() / t);
    hook.act(ActPoint::Pooled, pooled.data_mut());
    let mut logits = w.classifier.forward(&pooled);
    hook.linear(LayerId::Classifier, &pooled, &mut logits);
    Ok(logits.into_vec())
}
