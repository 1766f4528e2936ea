//! The deployment image: integer weights, scales, biases in accumulator
//! units and activation exponents, everything the integer path consumes.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::calib::{ActScales, CalibStats, Pow2ActQuant};
use super::weights::{pack_ternary, quantize_weights, ternarize, unpack_ternary, PerChannelQuantWeights, TernaryPacked};
use crate::error::{bail, Result};
use crate::fixed::{pow2, quantize_i8, round_half_away, Requant};
use crate::lut::softplus;
use crate::model::{ActPoint, BranchLayer, BranchPoint, Direction, FembaWeights, LayerId, ModelConfig, DT_MAX, DT_MIN};
use crate::tensor::Matrix;

/// Fractional bits of the scan step size Δ.
pub const DELTA_FRAC: u32 = 16;
/// Largest pow2 exponent used for stored parameter tensors.
pub const PARAM_MAX_EXPONENT: i32 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    W8A8,
    W4A8,
    W2A8,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::W8A8 => "w8a8",
            QuantMode::W4A8 => "w4a8",
            QuantMode::W2A8 => "w2a8",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "w8a8" => Some(QuantMode::W8A8),
            "w4a8" => Some(QuantMode::W4A8),
            "w2a8" => Some(QuantMode::W2A8),
            _ => None,
        }
    }

    pub fn weight_bits(self) -> u32 {
        match self {
            QuantMode::W8A8 => 8,
            QuantMode::W4A8 => 4,
            QuantMode::W2A8 => 2,
        }
    }

    /// Bits for a given layer; the classifier head stays at 8 bits.
    pub fn layer_bits(self, layer: LayerId) -> u32 {
        match layer {
            LayerId::Classifier => 8,
            _ => self.weight_bits(),
        }
    }
}

/// Per-channel quantization at `bits`, ternary rule for 2 bits.
pub fn quantize_layer(w: &Matrix, bits: u32) -> Result<PerChannelQuantWeights> {
    if bits == 2 {
        ternarize(w)
    } else {
        quantize_weights(w, bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QWeights {
    /// One value per byte (8-, 4- or expanded 2-bit values).
    Int8(Vec<i8>),
    Ternary(TernaryPacked),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLinear {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub weights: QWeights,
    /// Per-output-channel weight scale (exactly representable in `f32`).
    pub scales: Vec<f64>,
    /// Bias in accumulator units `s_c·2^-n_in`.
    pub bias: Option<Vec<i32>>,
    /// 32 unless the layer is marked as needing a wide accumulator.
    pub acc_bits: u32,
}

impl QLinear {
    pub fn from_quant(pq: PerChannelQuantWeights, bias: Option<&[f64]>, n_in: i32) -> Result<Self> {
        let weights = if pq.bits == 2 { QWeights::Ternary(pack_ternary(&pq.q)?) } else { QWeights::Int8(pq.q) };
        let bias = bias.map(|b| {
            b.iter()
                .zip(&pq.scales)
                .map(|(v, s)| {
                    let q = round_half_away(v / (s * pow2(-n_in)));
                    q.clamp(i32::MIN as f64, i32::MAX as f64) as i32
                })
                .collect()
        });
        Ok(Self { rows: pq.rows, cols: pq.cols, bits: pq.bits, weights, scales: pq.scales, bias, acc_bits: 32 })
    }

    #[inline]
    pub fn weight(&self, r: usize, c: usize) -> i8 {
        match &self.weights {
            QWeights::Int8(q) => q[r * self.cols + c],
            QWeights::Ternary(p) => p.get(r * self.cols + c),
        }
    }

    pub fn bias_q(&self, r: usize) -> i64 {
        self.bias.as_ref().map_or(0, |b| b[r] as i64)
    }

    pub fn expanded(&self) -> Vec<i8> {
        match &self.weights {
            QWeights::Int8(q) => q.clone(),
            QWeights::Ternary(p) => unpack_ternary(p).expect("image holds valid ternary words"),
        }
    }

    pub fn is_ternary(&self) -> bool {
        matches!(self.weights, QWeights::Ternary(_))
    }

    pub fn dequantized(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.scales[r] * self.weight(r, c) as f64)
    }

    /// Requantization from accumulator units at input exponent `n_in` to
    /// an activation at exponent `n_out`, for output channel `c`.
    pub fn requant(&self, c: usize, n_in: i32, n_out: i32) -> Result<Requant> {
        Requant::from_real(self.scales[c] * pow2(n_out - n_in))
    }

    /// Stored size of the weight payload in bytes.
    pub fn weight_bytes(&self) -> usize {
        match &self.weights {
            QWeights::Int8(q) => q.len(),
            QWeights::Ternary(p) => p.byte_len(),
        }
    }

    /// Checks that `d_in·127·127 + |bias|` fits a signed 32-bit accumulator,
    /// unless the layer is marked wide.
    pub fn check_accumulator(&self, name: &str) -> Result<()> {
        if self.acc_bits >= 64 {
            return Ok(());
        }
        let max_bias = self.bias.as_ref().map_or(0, |b| b.iter().map(|v| (*v as i64).abs()).max().unwrap_or(0));
        let bound = self.cols as i64 * 127 * 127 + max_bias;
        if bound >= 1i64 << 31 {
            bail!(Config, "accumulator of {} can reach {} which overflows 32 bits", name, bound);
        }
        Ok(())
    }
}

/// Integer parameters of one Mamba branch.
#[derive(Debug, Clone, PartialEq)]
pub struct QBranch {
    pub in_proj: QLinear,
    pub conv: QLinear,
    pub x_proj: QLinear,
    pub dt_proj: QLinear,
    pub out_proj: QLinear,
    /// `A = -exp(A_log)` as int8, `d_inner × d_state`, exponent `n_a`.
    pub a_q: Vec<i8>,
    pub n_a: i32,
    pub d_q: Vec<i8>,
    pub n_d: i32,
    /// Δ in Q16 for each int8 value of the `dt` activation (index `q + 128`).
    pub softplus: Vec<i32>,
}

impl QBranch {
    pub fn layer(&self, l: BranchLayer) -> &QLinear {
        match l {
            BranchLayer::InProj => &self.in_proj,
            BranchLayer::Conv => &self.conv,
            BranchLayer::XProj => &self.x_proj,
            BranchLayer::DtProj => &self.dt_proj,
            BranchLayer::OutProj => &self.out_proj,
        }
    }

    pub fn layer_mut(&mut self, l: BranchLayer) -> &mut QLinear {
        match l {
            BranchLayer::InProj => &mut self.in_proj,
            BranchLayer::Conv => &mut self.conv,
            BranchLayer::XProj => &mut self.x_proj,
            BranchLayer::DtProj => &mut self.dt_proj,
            BranchLayer::OutProj => &mut self.out_proj,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QBlock {
    pub fwd: QBranch,
    pub bwd: QBranch,
    pub fuse_proj: Option<QLinear>,
}

impl QBlock {
    pub fn branch(&self, d: Direction) -> &QBranch {
        match d {
            Direction::Fwd => &self.fwd,
            Direction::Bwd => &self.bwd,
        }
    }

    pub fn branch_mut(&mut self, d: Direction) -> &mut QBranch {
        match d {
            Direction::Fwd => &mut self.fwd,
            Direction::Bwd => &mut self.bwd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub config: ModelConfig,
    pub mode: QuantMode,
    pub tokenizer: QLinear,
    pub pos_q: Vec<i8>,
    pub n_pos: i32,
    pub blocks: Vec<QBlock>,
    pub classifier: QLinear,
    /// Exponent of every activation point.
    pub acts: BTreeMap<ActPoint, i32>,
}

/// Largest exponent whose int8 range covers `max|x|`.
pub fn param_exponent(x: &[f64]) -> i32 {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let stats = CalibStats { count: 1, min: -m, max: m, pctl_abs: m, percentile: 100.0 };
    super::calib::choose_pow2_scale(&stats, 8, true, PARAM_MAX_EXPONENT).map(|q| q.exponent).unwrap_or(0)
}

/// Δ table: `round(clamp(softplus(q·2^-n_dt), DT_MIN, DT_MAX)·2^16)`.
pub fn softplus_table(n_dt: i32) -> Vec<i32> {
    (-128i32..128)
        .map(|q| {
            let v = softplus(q as f64 * pow2(-n_dt)).clamp(DT_MIN, DT_MAX);
            round_half_away(v * pow2(DELTA_FRAC as i32)) as i32
        })
        .collect()
}

/// Activation exponent lookup with a configuration error when missing.
pub fn act_exponent(acts: &BTreeMap<ActPoint, i32>, p: ActPoint) -> Result<i32> {
    match acts.get(&p) {
        Some(&n) => Ok(n),
        None => bail!(Config, "missing activation scale for {}", p.name()),
    }
}

/// Exponent of the activation feeding `layer`.
pub fn layer_input_exponent(acts: &BTreeMap<ActPoint, i32>, layer: LayerId) -> Result<i32> {
    let bp = |block, dir, point| ActPoint::Branch { block, dir, point };
    match layer {
        LayerId::Tokenizer => act_exponent(acts, ActPoint::Input),
        LayerId::Branch { block, dir, layer } => match layer {
            BranchLayer::InProj => {
                if block == 0 {
                    act_exponent(acts, ActPoint::Tokens)
                } else {
                    act_exponent(acts, ActPoint::BlockOut(block - 1))
                }
            }
            BranchLayer::Conv => act_exponent(acts, bp(block, dir, BranchPoint::Xz)),
            BranchLayer::XProj => act_exponent(acts, bp(block, dir, BranchPoint::U)),
            BranchLayer::DtProj => act_exponent(acts, bp(block, dir, BranchPoint::XDbl)),
            BranchLayer::OutProj => act_exponent(acts, bp(block, dir, BranchPoint::Gated)),
        },
        LayerId::FuseProj(b) => Ok(act_exponent(acts, bp(b, Direction::Fwd, BranchPoint::Out))?
            .min(act_exponent(acts, bp(b, Direction::Bwd, BranchPoint::Out))?)),
        LayerId::Classifier => act_exponent(acts, ActPoint::Pooled),
    }
}

/// Exponent a layer's output is requantized to.
pub fn layer_output_point(layer: LayerId) -> ActPoint {
    match layer {
        LayerId::Tokenizer => ActPoint::Tokens,
        LayerId::Branch { block, dir, layer } => ActPoint::Branch {
            block,
            dir,
            point: match layer {
                BranchLayer::InProj => BranchPoint::Xz,
                BranchLayer::Conv => BranchPoint::Conv,
                BranchLayer::XProj => BranchPoint::XDbl,
                BranchLayer::DtProj => BranchPoint::DtPre,
                BranchLayer::OutProj => BranchPoint::Out,
            },
        },
        LayerId::FuseProj(b) => ActPoint::Fused(b),
        // logits stay in accumulator units
        LayerId::Classifier => ActPoint::Pooled,
    }
}

fn quantize_pow2_i8(x: &[f64]) -> (Vec<i8>, i32) {
    let n = param_exponent(x);
    (x.iter().map(|&v| quantize_i8(v, n)).collect(), n)
}

pub fn exponents_of(scales: &ActScales) -> BTreeMap<ActPoint, i32> {
    scales.iter().map(|(p, q)| (*p, q.exponent)).collect()
}

/// Quantizes a float checkpoint into a deployment image.
pub fn build_image(w: &FembaWeights, scales: &ActScales, mode: QuantMode) -> Result<QuantModel> {
    let cfg = &w.config;
    cfg.validate()?;
    let acts = exponents_of(scales);
    for p in ActPoint::all(cfg) {
        act_exponent(&acts, p)?;
    }
    let qlin = |layer: LayerId| -> Result<QLinear> {
        let l = layer.get(w);
        let pq = quantize_layer(&l.weight, mode.layer_bits(layer))?;
        QLinear::from_quant(pq, l.bias.as_deref(), layer_input_exponent(&acts, layer)?)
    };
    let tokenizer = qlin(LayerId::Tokenizer)?;
    let (pos_q, n_pos) = quantize_pow2_i8(w.pos_embed.data());
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for (block, bw) in w.blocks.iter().enumerate() {
        let branch = |dir: Direction| -> Result<QBranch> {
            let br = bw.branch(dir);
            let ly = |layer| LayerId::Branch { block, dir, layer };
            let a: Vec<f64> = br.a_log.data().iter().map(|v| -libm::exp(*v)).collect();
            let (a_q, n_a) = quantize_pow2_i8(&a);
            let (d_q, n_d) = quantize_pow2_i8(&br.d);
            let n_dt = act_exponent(&acts, ActPoint::Branch { block, dir, point: BranchPoint::DtPre })?;
            Ok(QBranch {
                in_proj: qlin(ly(BranchLayer::InProj))?,
                conv: qlin(ly(BranchLayer::Conv))?,
                x_proj: qlin(ly(BranchLayer::XProj))?,
                dt_proj: qlin(ly(BranchLayer::DtProj))?,
                out_proj: qlin(ly(BranchLayer::OutProj))?,
                a_q,
                n_a,
                d_q,
                n_d,
                softplus: softplus_table(n_dt),
            })
        };
        let fwd = branch(Direction::Fwd)?;
        let bwd = branch(Direction::Bwd)?;
        let fuse_proj = if cfg.fusion.has_projection() { Some(qlin(LayerId::FuseProj(block))?) } else { None };
        blocks.push(QBlock { fwd, bwd, fuse_proj });
    }
    let classifier = qlin(LayerId::Classifier)?;
    Ok(QuantModel { config: cfg.clone(), mode, tokenizer, pos_q, n_pos, blocks, classifier, acts })
}

impl QuantModel {
    pub fn layer(&self, id: LayerId) -> &QLinear {
        match id {
            LayerId::Tokenizer => &self.tokenizer,
            LayerId::Branch { block, dir, layer } => self.blocks[block].branch(dir).layer(layer),
            LayerId::FuseProj(b) => self.blocks[b].fuse_proj.as_ref().expect("fusion projection present"),
            LayerId::Classifier => &self.classifier,
        }
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut QLinear {
        match id {
            LayerId::Tokenizer => &mut self.tokenizer,
            LayerId::Branch { block, dir, layer } => self.blocks[block].branch_mut(dir).layer_mut(layer),
            LayerId::FuseProj(b) => self.blocks[b].fuse_proj.as_mut().expect("fusion projection present"),
            LayerId::Classifier => &mut self.classifier,
        }
    }

    pub fn act(&self, p: ActPoint) -> Result<i32> {
        act_exponent(&self.acts, p)
    }

    /// Same image with ternary layers stored one value per byte.
    pub fn expand_ternary(&self) -> Self {
        let mut out = self.clone();
        for id in LayerId::all(&self.config) {
            let l = out.layer_mut(id);
            if l.is_ternary() {
                l.weights = QWeights::Int8(l.expanded());
            }
        }
        out
    }

    /// Load-time checks: shapes, exponents and accumulator bounds.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        for p in ActPoint::all(c) {
            let n = self.act(p)?;
            if !(0..=PARAM_MAX_EXPONENT).contains(&n) {
                bail!(Config, "exponent {} of {} outside [0, {}]", n, p.name(), PARAM_MAX_EXPONENT);
            }
        }
        if self.blocks.len() != c.n_blocks || self.pos_q.len() != c.n_tokens * c.d_model {
            bail!(Shape, "image does not match its configuration");
        }
        for id in LayerId::all(c) {
            let l = self.layer(id);
            let want = expected_shape(c, id);
            if (l.rows, l.cols) != want || l.scales.len() != l.rows {
                bail!(Shape, "{} is {}x{}, expected {}x{}", id.name(), l.rows, l.cols, want.0, want.1);
            }
            if l.bias.as_ref().is_some_and(|b| b.len() != l.rows) {
                bail!(Shape, "{} bias length mismatch", id.name());
            }
            let n = match &l.weights {
                QWeights::Int8(q) => q.len(),
                QWeights::Ternary(p) => p.count,
            };
            if n != l.rows * l.cols {
                bail!(Shape, "{} holds {} weights, expected {}", id.name(), n, l.rows * l.cols);
            }
            if let QWeights::Ternary(p) = &l.weights {
                unpack_ternary(p)?;
            }
            if l.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                bail!(Config, "{} has a non-positive scale", id.name());
            }
            l.check_accumulator(&id.name())?;
        }
        for b in &self.blocks {
            for br in [&b.fwd, &b.bwd] {
                let e = c.d_inner;
                if br.a_q.len() != e * c.d_state || br.d_q.len() != e || br.softplus.len() != 256 {
                    bail!(Shape, "scan parameters do not match the configuration");
                }
            }
        }
        Ok(())
    }

    /// Bytes of all stored tensors (weights, scales, biases, scan tables).
    pub fn payload_bytes(&self) -> usize {
        let mut total = self.pos_q.len();
        for id in LayerId::all(&self.config) {
            let l = self.layer(id);
            total += l.weight_bytes() + 4 * l.scales.len() + l.bias.as_ref().map_or(0, |b| 4 * b.len());
        }
        for b in &self.blocks {
            for br in [&b.fwd, &b.bwd] {
                total += br.a_q.len() + br.d_q.len() + 4 * br.softplus.len();
            }
        }
        total
    }

    pub fn layer_names(&self) -> Vec<(LayerId, String)> {
        LayerId::all(&self.config).into_iter().map(|l| (l, l.name())).collect()
    }

    /// Scale map back in quantizer form.
    pub fn act_scales(&self) -> ActScales {
        self.acts.iter().map(|(p, &n)| (*p, Pow2ActQuant { exponent: n, bits: p.bits(), signed: true })).collect()
    }
}

pub fn expected_shape(c: &ModelConfig, id: LayerId) -> (usize, usize) {
    match id {
        LayerId::Tokenizer => (c.groups() * c.d_model, c.n_channels * c.patch_size),
        LayerId::Branch { layer, .. } => match layer {
            BranchLayer::InProj => (2 * c.d_inner, c.d_model),
            BranchLayer::Conv => (c.d_inner, c.d_conv),
            BranchLayer::XProj => (c.dt_rank + 2 * c.d_state, c.d_inner),
            BranchLayer::DtProj => (c.d_inner, c.dt_rank),
            BranchLayer::OutProj => (c.d_model, c.d_inner),
        },
        LayerId::FuseProj(_) => (c.d_model, 2 * c.d_model),
        LayerId::Classifier => (c.n_classes, c.d_model),
    }
}
