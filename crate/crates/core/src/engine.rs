//! Integer-only inference.
//!
//! INT8 activations with power-of-two exponents, INT8 or packed ternary
//! weights, 32-bit accumulation (64-bit for layers marked wide), Q15 scan
//! state and LUT nonlinearities. Results are bit-identical to
//! [`crate::quant::reference_forward`] for any blocking and any partition of
//! the work across an [`Executor`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{bail, Result};
use crate::fixed::{align, div_round, pow2, quantize_i8, rshift_round, sat_i16, Requant, I8_MAX, I8_MIN};
use crate::lut::{Lut, LUT_IN_FRAC, SILU_OUT_FRAC};
use crate::model::{ActPoint, BranchPoint, Direction, Fusion, ModelConfig};
use crate::quant::{IntOutput, IntTensor, IntTrace, QLinear, QWeights, QuantModel, TernaryPacked, DELTA_FRAC};
use crate::tensor::Matrix;

/// Row-major INT8 tensor with exponent `n` (value `q·2^-n`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Int8Tensor {
    pub rows: usize,
    pub cols: usize,
    pub exponent: i32,
    pub data: Vec<i8>,
}

impl Int8Tensor {
    pub fn new(rows: usize, cols: usize, exponent: i32, data: Vec<i8>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Shape, "{} values for a {}x{} tensor", data.len(), rows, cols);
        }
        if data.contains(&i8::MIN) {
            bail!(Numeric, "-128 is outside the symmetric INT8 range");
        }
        Ok(Self { rows, cols, exponent, data })
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Splits work items into independent contiguous ranges and runs them.
///
/// Implementations may run parts concurrently; the results must come back
/// in part order.
pub trait Executor {
    fn map_ranges<T: Send>(&self, n: usize, f: &(dyn Fn(Range<usize>) -> T + Sync)) -> Vec<T>;
}

/// Runs parts one after another on the calling thread.
#[derive(Debug, Clone, Copy)]
pub struct Sequential {
    pub parts: usize,
}

impl Default for Sequential {
    fn default() -> Self {
        Self { parts: 1 }
    }
}

impl Executor for Sequential {
    fn map_ranges<T: Send>(&self, n: usize, f: &(dyn Fn(Range<usize>) -> T + Sync)) -> Vec<T> {
        partition(n, self.parts).into_iter().map(f).collect()
    }
}

/// `parts` contiguous ranges covering `0..n`, sizes differing by at most one.
/// Empty ranges are dropped.
pub fn partition(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1).min(n.max(1));
    let (base, extra) = (n / parts, n % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + (p < extra) as usize;
        if len > 0 {
            out.push(start..start + len);
        }
        start += len;
    }
    out
}

trait Accum: Copy + Default + core::ops::AddAssign {
    fn from_i32(v: i32) -> Self;
    fn to_i64(self) -> i64;
}

impl Accum for i32 {
    #[inline(always)]
    fn from_i32(v: i32) -> Self {
        v
    }
    #[inline(always)]
    fn to_i64(self) -> i64 {
        self as i64
    }
}

impl Accum for i64 {
    #[inline(always)]
    fn from_i32(v: i32) -> Self {
        v as i64
    }
    #[inline(always)]
    fn to_i64(self) -> i64 {
        self
    }
}

const BLOCK: usize = 4;

/// Weight matrix view for the matmul kernels.
#[derive(Clone, Copy)]
pub enum WeightsRef<'a> {
    Int8(&'a [i8]),
    Ternary(&'a TernaryPacked),
}

impl WeightsRef<'_> {
    fn len(&self) -> usize {
        match self {
            WeightsRef::Int8(w) => w.len(),
            WeightsRef::Ternary(p) => p.count,
        }
    }

    /// Copies row `r` (width `cols`) into `dst`, unpacking 2-bit fields.
    #[inline]
    fn load_row(&self, r: usize, cols: usize, dst: &mut [i8]) {
        match self {
            WeightsRef::Int8(w) => dst.copy_from_slice(&w[r * cols..(r + 1) * cols]),
            WeightsRef::Ternary(p) => {
                let base = r * cols;
                for (c, d) in dst.iter_mut().enumerate() {
                    let i = base + c;
                    let code = (p.words[i / 16] >> (2 * (i % 16))) & 0b11;
                    *d = code as i8 - 1;
                }
            }
        }
    }
}

/// `acc[t][r] = bias[r] + Σ_k act[t][k]·W[r][k]` over output rows
/// `rows`, in 4×4 register blocks, handing each finished accumulator to
/// `emit(t, r, acc)`.
fn kernel<A: Accum>(
    act: &[i8],
    t_len: usize,
    cols: usize,
    w: WeightsRef<'_>,
    bias: Option<&[i32]>,
    rows: Range<usize>,
    emit: &mut dyn FnMut(usize, usize, i64),
) {
    let mut wbuf = vec![0i8; BLOCK * cols];
    let mut r0 = rows.start;
    while r0 < rows.end {
        let br = BLOCK.min(rows.end - r0);
        for j in 0..br {
            w.load_row(r0 + j, cols, &mut wbuf[j * cols..(j + 1) * cols]);
        }
        let mut t0 = 0;
        while t0 < t_len {
            let bt = BLOCK.min(t_len - t0);
            let mut acc = [[A::default(); BLOCK]; BLOCK];
            for (j, row) in acc.iter_mut().enumerate().take(br) {
                let b = bias.map_or(0, |b| b[r0 + j]);
                row.iter_mut().take(bt).for_each(|a| *a = A::from_i32(b));
            }
            for k in 0..cols {
                let mut a = [0i32; BLOCK];
                for (i, av) in a.iter_mut().enumerate().take(bt) {
                    *av = act[(t0 + i) * cols + k] as i32;
                }
                for j in 0..br {
                    let wv = wbuf[j * cols + k] as i32;
                    for i in 0..bt {
                        acc[j][i] += A::from_i32(a[i] * wv);
                    }
                }
            }
            for j in 0..br {
                for i in 0..bt {
                    emit(t0 + i, r0 + j, acc[j][i].to_i64());
                }
            }
            t0 += bt;
        }
        r0 += br;
    }
}

fn run_kernel(
    act: &[i8],
    t_len: usize,
    cols: usize,
    w: WeightsRef<'_>,
    bias: Option<&[i32]>,
    rows: Range<usize>,
    wide: bool,
    emit: &mut dyn FnMut(usize, usize, i64),
) {
    if wide {
        kernel::<i64>(act, t_len, cols, w, bias, rows, emit)
    } else {
        kernel::<i32>(act, t_len, cols, w, bias, rows, emit)
    }
}

fn check_bound(cols: usize, bias: Option<&[i32]>) -> Result<()> {
    let max_bias = bias.map_or(0, |b| b.iter().map(|v| (*v as i64).abs()).max().unwrap_or(0));
    let bound = cols as i64 * 127 * 127 + max_bias;
    if bound >= 1i64 << 31 {
        bail!(Config, "accumulator bound {} exceeds 32 bits", bound);
    }
    Ok(())
}

fn matmul_checked(
    act: &Int8Tensor,
    w: WeightsRef<'_>,
    out_features: usize,
    bias: Option<&[i32]>,
    requant: &[Requant],
    out_exponent: i32,
    sat: &mut u64,
) -> Result<Int8Tensor> {
    if w.len() != out_features * act.cols {
        bail!(Shape, "weights hold {} values, expected {}x{}", w.len(), out_features, act.cols);
    }
    if bias.is_some_and(|b| b.len() != out_features) {
        bail!(Shape, "bias length does not match {} outputs", out_features);
    }
    if requant.len() != out_features && requant.len() != 1 {
        bail!(Shape, "need 1 or {} requantizers, got {}", out_features, requant.len());
    }
    check_bound(act.cols, bias)?;
    let mut out = vec![0i8; act.rows * out_features];
    let mut emit = |t: usize, r: usize, acc: i64| {
        let rq = if requant.len() == 1 { requant[0] } else { requant[r] };
        out[t * out_features + r] = sat8(rq.apply(acc), sat);
    };
    run_kernel(&act.data, act.rows, act.cols, w, bias, 0..out_features, false, &mut emit);
    Ok(Int8Tensor { rows: act.rows, cols: out_features, exponent: out_exponent, data: out })
}

/// `out = sat8(requant(act · Wᵀ + bias))`; `requant` is per output channel
/// or a single entry for all.
pub fn int8_matmul(
    act: &Int8Tensor,
    w: &[i8],
    out_features: usize,
    bias: Option<&[i32]>,
    requant: &[Requant],
    out_exponent: i32,
    sat: &mut u64,
) -> Result<Int8Tensor> {
    matmul_checked(act, WeightsRef::Int8(w), out_features, bias, requant, out_exponent, sat)
}

/// As [`int8_matmul`] with 2-bit weights unpacked inside the dot-product
/// loop.
pub fn ternary_matmul(
    act: &Int8Tensor,
    w: &TernaryPacked,
    out_features: usize,
    bias: Option<&[i32]>,
    requant: &[Requant],
    out_exponent: i32,
    sat: &mut u64,
) -> Result<Int8Tensor> {
    matmul_checked(act, WeightsRef::Ternary(w), out_features, bias, requant, out_exponent, sat)
}

#[inline]
fn sat8(x: i64, sat: &mut u64) -> i8 {
    if !(I8_MIN..=I8_MAX).contains(&x) {
        *sat += 1;
    }
    x.clamp(I8_MIN, I8_MAX) as i8
}

/// Causal depthwise FIR over the rows of `x` (time) per column (channel);
/// `kernel` is `cols × k`, its last tap multiplies the current sample.
pub fn depthwise_conv_int8(
    x: &Int8Tensor,
    kernel: &[i8],
    k: usize,
    bias: Option<&[i32]>,
    requant: &[Requant],
    out_exponent: i32,
    sat: &mut u64,
) -> Result<Int8Tensor> {
    let e = x.cols;
    if kernel.len() != e * k || bias.is_some_and(|b| b.len() != e) || requant.len() != e {
        bail!(Shape, "depthwise kernel does not match {} channels of width {}", e, k);
    }
    let mut out = vec![0i8; x.rows * e];
    for t in 0..x.rows {
        let first = (k - 1).saturating_sub(t);
        for ch in 0..e {
            let mut acc = bias.map_or(0, |b| b[ch]) as i64;
            for tap in first..k {
                let src = t + tap + 1 - k;
                acc += kernel[ch * k + tap] as i64 * x.data[src * e + ch] as i64;
            }
            out[t * e + ch] = sat8(requant[ch].apply(acc), sat);
        }
    }
    Ok(Int8Tensor { rows: x.rows, cols: e, exponent: out_exponent, data: out })
}

/// One Q15-style state update: `h ← sat16(round(ā·h / 2^15) + term)`.
#[inline(always)]
fn state_step(abar: i64, h: i16, term: i64) -> (i16, bool) {
    sat_i16(rshift_round(abar * h as i64, 15) + term)
}

/// Scalar Q15 recurrence `h_t = Ā_t·h_{t-1} + B̄_t·x_t`, `h_0 = 0`, with
/// rounded products and a saturating sum. Returns every `h_t` and the
/// number of saturated steps.
pub fn q15_scan(abar: &[i16], bbar: &[i16], x: &[i16]) -> (Vec<i16>, u64) {
    let mut h = 0i16;
    let mut sat = 0;
    let mut out = Vec::with_capacity(x.len());
    for ((&a, &b), &xv) in abar.iter().zip(bbar).zip(x) {
        let term = rshift_round(b as i64 * xv as i64, 15);
        let (v, clipped) = state_step(a as i64, h, term);
        h = v;
        sat += clipped as u64;
        out.push(h);
    }
    (out, sat)
}

/// Parameters of one branch's integer scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanParams {
    pub d_inner: usize,
    pub d_state: usize,
    pub a_q: Vec<i8>,
    pub n_a: i32,
    pub d_q: Vec<i8>,
    pub n_d: i32,
    /// Δ in Q16 per int8 `dt` value (index `q + 128`).
    pub delta: Vec<i32>,
    pub n_xdbl: i32,
    pub n_u: i32,
    pub n_h: i32,
    pub n_y: i32,
}

/// Per-step scan inputs, all `T`-major.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    pub t_len: usize,
    /// `T × d_inner`.
    pub u: &'a [i8],
    /// `T × d_inner` pre-softplus step sizes.
    pub dt: &'a [i8],
    /// `T × (dt_rank + 2·d_state)`; B and C are read from columns
    /// `dt_rank..`.
    pub xdbl: &'a [i8],
    pub dt_rank: usize,
}

/// Output of the scan over a channel range.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPart {
    pub channels: Range<usize>,
    /// `T × len` outputs.
    pub y: Vec<i8>,
    /// Final state, `len × d_state`.
    pub h: Vec<i16>,
    pub saturations: u64,
    pub state_saturations: u64,
}

/// Scans channels `channels` independently of every other channel.
pub fn scan_channels(p: &ScanParams, inp: &ScanInputs<'_>, exp: &Lut, channels: Range<usize>) -> ScanPart {
    let (e, ns) = (p.d_inner, p.d_state);
    let w_xd = inp.dt_rank + 2 * ns;
    let len = channels.len();
    let mut y = vec![0i8; inp.t_len * len];
    let mut hs = vec![0i16; len * ns];
    let (mut sat, mut state_sat) = (0u64, 0u64);
    let e1 = p.n_xdbl + p.n_h;
    let top = e1.max(p.n_d + p.n_u);
    let term_exp = DELTA_FRAC as i32 + p.n_xdbl + p.n_u;
    let da_min = -16 * (1i64 << DELTA_FRAC);
    for (li, ch) in channels.clone().enumerate() {
        let h = &mut hs[li * ns..(li + 1) * ns];
        let a = &p.a_q[ch * ns..(ch + 1) * ns];
        for t in 0..inp.t_len {
            let row = &inp.xdbl[t * w_xd + inp.dt_rank..(t + 1) * w_xd];
            let (bt, ct) = row.split_at(ns);
            let delta = p.delta[(inp.dt[t * e + ch] as i32 + 128) as usize] as i64;
            let uq = inp.u[t * e + ch] as i64;
            let du = delta * uq;
            let mut acc = 0i64;
            for s in 0..ns {
                let da = rshift_round(delta * a[s] as i64, p.n_a as u32).clamp(da_min, 0);
                let abar = exp.eval(da) as i64;
                let term = align(du * bt[s] as i64, term_exp, p.n_h);
                let (v, clipped) = state_step(abar, h[s], term);
                h[s] = v;
                state_sat += clipped as u64;
                acc += ct[s] as i64 * v as i64;
            }
            let dq = p.d_q[ch] as i64 * uq;
            let sum = align(acc, e1, top) + align(dq, p.n_d + p.n_u, top);
            y[t * len + li] = sat8(align(sum, top, p.n_y), &mut sat);
        }
    }
    ScanPart { channels, y, h: hs, saturations: sat + state_sat, state_saturations: state_sat }
}

/// Channel-parallel scan; the result does not depend on the partition.
pub fn q15_selective_scan<E: Executor + ?Sized>(
    p: &ScanParams,
    inp: &ScanInputs<'_>,
    exp: &Lut,
    exec: &E,
) -> ScanPart {
    let parts = exec.map_ranges(p.d_inner, &|r| scan_channels(p, inp, exp, r));
    let (e, ns) = (p.d_inner, p.d_state);
    let mut y = vec![0i8; inp.t_len * e];
    let mut h = vec![0i16; e * ns];
    let (mut sat, mut state_sat) = (0, 0);
    for part in parts {
        let len = part.channels.len();
        for t in 0..inp.t_len {
            y[t * e + part.channels.start..t * e + part.channels.end].copy_from_slice(&part.y[t * len..(t + 1) * len]);
        }
        h[part.channels.start * ns..part.channels.end * ns].copy_from_slice(&part.h);
        sat += part.saturations;
        state_sat += part.state_saturations;
    }
    ScanPart { channels: 0..e, y, h, saturations: sat, state_saturations: state_sat }
}

/// A dense layer prepared for the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ELinear {
    pub rows: usize,
    pub cols: usize,
    pub weights: QWeights,
    pub bias: Option<Vec<i32>>,
    pub requant: Vec<Requant>,
    pub n_in: i32,
    pub n_out: i32,
    pub wide: bool,
}

impl ELinear {
    fn load(l: &QLinear, n_in: i32, n_out: i32, name: &str) -> Result<Self> {
        l.check_accumulator(name)?;
        let requant = (0..l.rows).map(|c| l.requant(c, n_in, n_out)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows: l.rows,
            cols: l.cols,
            weights: l.weights.clone(),
            bias: l.bias.clone(),
            requant,
            n_in,
            n_out,
            wide: l.acc_bits >= 64,
        })
    }

    fn wref(&self) -> WeightsRef<'_> {
        match &self.weights {
            QWeights::Int8(w) => WeightsRef::Int8(w),
            QWeights::Ternary(p) => WeightsRef::Ternary(p),
        }
    }

    /// Row-partitioned matmul with a custom epilogue per part.
    fn run<E: Executor + ?Sized, T: Send>(
        &self,
        act: &[i8],
        t_len: usize,
        exec: &E,
        part: &(dyn Fn(Range<usize>, &mut dyn FnMut(&mut dyn FnMut(usize, usize, i64))) -> T + Sync),
    ) -> Vec<T> {
        exec.map_ranges(self.rows, &|rows: Range<usize>| {
            let r = rows.clone();
            part(rows, &mut |emit| run_kernel(act, t_len, self.cols, self.wref(), self.bias.as_deref(), r.clone(), self.wide, emit))
        })
    }

    /// `sat8(requant(acc))` for every output, `T × rows`.
    fn forward<E: Executor + ?Sized>(&self, act: &[i8], t_len: usize, exec: &E, sat: &mut u64) -> Vec<i8> {
        let rows = self.rows;
        let parts = self.run(act, t_len, exec, &|r, go| {
            let mut out = vec![0i8; t_len * r.len()];
            let mut s = 0u64;
            let w = r.len();
            go(&mut |t, o, acc| out[t * w + o - r.start] = sat8(self.requant[o].apply(acc), &mut s));
            (r, out, s)
        });
        let mut out = vec![0i8; t_len * rows];
        for (r, part, s) in parts {
            let w = r.len();
            for t in 0..t_len {
                out[t * rows + r.start..t * rows + r.end].copy_from_slice(&part[t * w..(t + 1) * w]);
            }
            *sat += s;
        }
        out
    }

    /// Raw accumulators, `T × rows`.
    fn accumulate<E: Executor + ?Sized>(&self, act: &[i8], t_len: usize, exec: &E) -> Vec<i64> {
        let rows = self.rows;
        let parts = self.run(act, t_len, exec, &|r, go| {
            let w = r.len();
            let mut out = vec![0i64; t_len * w];
            go(&mut |t, o, acc| out[t * w + o - r.start] = acc);
            (r, out)
        });
        let mut out = vec![0i64; t_len * rows];
        for (r, part) in parts {
            let w = r.len();
            for t in 0..t_len {
                out[t * rows + r.start..t * rows + r.end].copy_from_slice(&part[t * w..(t + 1) * w]);
            }
        }
        out
    }
}

/// SiLU on the int8 grid as a 256-entry table with saturation flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SiluTable {
    pub values: [i8; 256],
    pub clipped: [bool; 256],
}

impl SiluTable {
    pub fn new(lut: &Lut, n_in: i32, n_out: i32) -> Self {
        let mut values = [0i8; 256];
        let mut clipped = [false; 256];
        for q in -128i64..128 {
            let y = lut.eval(align(q, n_in, LUT_IN_FRAC as i32)) as i64;
            let v = align(y, SILU_OUT_FRAC as i32, n_out);
            let i = (q + 128) as usize;
            clipped[i] = !(I8_MIN..=I8_MAX).contains(&v);
            values[i] = v.clamp(I8_MIN, I8_MAX) as i8;
        }
        Self { values, clipped }
    }

    #[inline]
    fn apply(&self, q: i8, sat: &mut u64) -> i8 {
        let i = (q as i16 + 128) as usize;
        *sat += self.clipped[i] as u64;
        self.values[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EBranch {
    pub in_proj: ELinear,
    pub conv_kernel: Vec<i8>,
    pub conv_bias: Option<Vec<i32>>,
    pub conv_requant: Vec<Requant>,
    pub x_proj: ELinear,
    pub dt_proj: ELinear,
    pub out_proj: ELinear,
    pub scan: ScanParams,
    pub silu_u: SiluTable,
    pub silu_gate: SiluTable,
    pub n_xz: i32,
    pub n_conv: i32,
    pub n_dt: i32,
    pub n_gate: i32,
    pub n_gated: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EBlock {
    pub fwd: EBranch,
    pub bwd: EBranch,
    pub fuse_proj: Option<ELinear>,
    pub n_fuse: i32,
    pub n_out: i32,
}

/// A deployment image prepared for execution: requantizers resolved,
/// tables built and accumulator bounds checked.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineModel {
    pub config: ModelConfig,
    pub n_input: i32,
    pub tokenizer: ELinear,
    /// Positional embedding aligned to the token exponent.
    pub pos: Vec<i64>,
    pub blocks: Vec<EBlock>,
    pub n_pool: i32,
    pub classifier: ELinear,
    pub classifier_scales: Vec<f64>,
    exp: Lut,
}

impl EngineModel {
    pub fn load(m: &QuantModel) -> Result<Self> {
        m.validate()?;
        let c = &m.config;
        let n_input = m.act(ActPoint::Input)?;
        let n_tok = m.act(ActPoint::Tokens)?;
        let silu = Lut::silu();
        let tokenizer = ELinear::load(&m.tokenizer, n_input, n_tok, "tokenizer")?;
        let pos = m.pos_q.iter().map(|&q| align(q as i64, m.n_pos, n_tok)).collect();
        let mut blocks = Vec::with_capacity(c.n_blocks);
        let mut n_cur = n_tok;
        for (block, qb) in m.blocks.iter().enumerate() {
            let branch = |dir: Direction| -> Result<EBranch> {
                let br = qb.branch(dir);
                let pt = |point| m.act(ActPoint::Branch { block, dir, point });
                let (n_xz, n_conv, n_u, n_xd, n_dt) =
                    (pt(BranchPoint::Xz)?, pt(BranchPoint::Conv)?, pt(BranchPoint::U)?, pt(BranchPoint::XDbl)?, pt(BranchPoint::DtPre)?);
                let (n_h, n_y, n_gate, n_gated, n_out) =
                    (pt(BranchPoint::State)?, pt(BranchPoint::Y)?, pt(BranchPoint::Gate)?, pt(BranchPoint::Gated)?, pt(BranchPoint::Out)?);
                let name = |l: &str| alloc::format!("blocks.{block}.{}.{l}", dir.name());
                br.conv.check_accumulator(&name("conv"))?;
                let conv_requant = (0..br.conv.rows).map(|ch| br.conv.requant(ch, n_xz, n_conv)).collect::<Result<Vec<_>>>()?;
                Ok(EBranch {
                    in_proj: ELinear::load(&br.in_proj, n_cur, n_xz, &name("in_proj"))?,
                    conv_kernel: br.conv.expanded(),
                    conv_bias: br.conv.bias.clone(),
                    conv_requant,
                    x_proj: ELinear::load(&br.x_proj, n_u, n_xd, &name("x_proj"))?,
                    dt_proj: ELinear::load(&br.dt_proj, n_xd, n_dt, &name("dt_proj"))?,
                    out_proj: ELinear::load(&br.out_proj, n_gated, n_out, &name("out_proj"))?,
                    scan: ScanParams {
                        d_inner: c.d_inner,
                        d_state: c.d_state,
                        a_q: br.a_q.clone(),
                        n_a: br.n_a,
                        d_q: br.d_q.clone(),
                        n_d: br.n_d,
                        delta: br.softplus.clone(),
                        n_xdbl: n_xd,
                        n_u,
                        n_h,
                        n_y,
                    },
                    silu_u: SiluTable::new(&silu, n_conv, n_u),
                    silu_gate: SiluTable::new(&silu, n_xz, n_gate),
                    n_xz,
                    n_conv,
                    n_dt,
                    n_gate,
                    n_gated,
                })
            };
            let fwd = branch(Direction::Fwd)?;
            let bwd = branch(Direction::Bwd)?;
            let n_fuse = m.act(ActPoint::Fused(block))?;
            let fuse_proj = match &qb.fuse_proj {
                Some(l) => {
                    let n_cat = fwd.out_proj.n_out.min(bwd.out_proj.n_out);
                    Some(ELinear::load(l, n_cat, n_fuse, &alloc::format!("blocks.{block}.fuse_proj"))?)
                }
                None => None,
            };
            let n_out = m.act(ActPoint::BlockOut(block))?;
            blocks.push(EBlock { fwd, bwd, fuse_proj, n_fuse, n_out });
            n_cur = n_out;
        }
        let n_pool = m.act(ActPoint::Pooled)?;
        let classifier = ELinear::load(&m.classifier, n_pool, n_pool, "classifier")?;
        Ok(Self {
            config: c.clone(),
            n_input,
            tokenizer,
            pos,
            blocks,
            n_pool,
            classifier,
            classifier_scales: m.classifier.scales.clone(),
            exp: Lut::exp(),
        })
    }
}

struct Run {
    sat: u64,
    state_sat: u64,
    state_updates: u64,
    trace: Option<IntTrace>,
}

impl Run {
    fn dump(&mut self, p: ActPoint, rows: usize, cols: usize, x: &[i8]) {
        if let Some(t) = self.trace.as_mut() {
            t.insert(p, IntTensor::from_i8(rows, cols, x));
        }
    }
}

fn reverse_time(x: &[i8], t_len: usize, w: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(x.len());
    for t in (0..t_len).rev() {
        out.extend_from_slice(&x[t * w..(t + 1) * w]);
    }
    out
}

fn run_branch<E: Executor + ?Sized>(
    em: &EngineModel,
    br: &EBranch,
    tokens: &[i8],
    block: usize,
    dir: Direction,
    exec: &E,
    run: &mut Run,
) -> Result<Vec<i8>> {
    let c = &em.config;
    let (t_len, d, e, ns, r) = (c.n_tokens, c.d_model, c.d_inner, c.d_state, c.dt_rank);
    let pt = |point| ActPoint::Branch { block, dir, point };
    let xs = match dir {
        Direction::Fwd => tokens.to_vec(),
        Direction::Bwd => reverse_time(tokens, t_len, d),
    };
    let xz = br.in_proj.forward(&xs, t_len, exec, &mut run.sat);
    run.dump(pt(BranchPoint::Xz), t_len, 2 * e, &xz);

    let mut x_in = Vec::with_capacity(t_len * e);
    for t in 0..t_len {
        x_in.extend_from_slice(&xz[t * 2 * e..t * 2 * e + e]);
    }
    let x_in = Int8Tensor { rows: t_len, cols: e, exponent: br.n_xz, data: x_in };
    let conv =
        depthwise_conv_int8(&x_in, &br.conv_kernel, c.d_conv, br.conv_bias.as_deref(), &br.conv_requant, br.n_conv, &mut run.sat)?;
    run.dump(pt(BranchPoint::Conv), t_len, e, &conv.data);

    let u: Vec<i8> = conv.data.iter().map(|&q| br.silu_u.apply(q, &mut run.sat)).collect();
    run.dump(pt(BranchPoint::U), t_len, e, &u);

    let xdbl = br.x_proj.forward(&u, t_len, exec, &mut run.sat);
    let w_xd = r + 2 * ns;
    run.dump(pt(BranchPoint::XDbl), t_len, w_xd, &xdbl);

    let mut dt_in = Vec::with_capacity(t_len * r);
    for t in 0..t_len {
        dt_in.extend_from_slice(&xdbl[t * w_xd..t * w_xd + r]);
    }
    let dt = br.dt_proj.forward(&dt_in, t_len, exec, &mut run.sat);
    run.dump(pt(BranchPoint::DtPre), t_len, e, &dt);

    let inputs = ScanInputs { t_len, u: &u, dt: &dt, xdbl: &xdbl, dt_rank: r };
    let scan = q15_selective_scan(&br.scan, &inputs, &em.exp, exec);
    run.sat += scan.saturations;
    run.state_sat += scan.state_saturations;
    run.state_updates += (t_len * e * ns) as u64;
    if let Some(tr) = run.trace.as_mut() {
        tr.insert(pt(BranchPoint::State), IntTensor::from_i16(e, ns, &scan.h));
    }
    let y = scan.y;
    run.dump(pt(BranchPoint::Y), t_len, e, &y);

    let mut gate = Vec::with_capacity(t_len * e);
    for t in 0..t_len {
        for &q in &xz[t * 2 * e + e..(t + 1) * 2 * e] {
            gate.push(br.silu_gate.apply(q, &mut run.sat));
        }
    }
    run.dump(pt(BranchPoint::Gate), t_len, e, &gate);

    let prod_exp = br.scan.n_y + br.n_gate;
    let gated: Vec<i8> =
        y.iter().zip(&gate).map(|(&a, &b)| sat8(align(a as i64 * b as i64, prod_exp, br.n_gated), &mut run.sat)).collect();
    run.dump(pt(BranchPoint::Gated), t_len, e, &gated);

    let out = br.out_proj.forward(&gated, t_len, exec, &mut run.sat);
    run.dump(pt(BranchPoint::Out), t_len, d, &out);
    Ok(match dir {
        Direction::Fwd => out,
        Direction::Bwd => reverse_time(&out, t_len, d),
    })
}

/// Integer forward pass. `trace` records every activation point.
pub fn engine_forward<E: Executor + ?Sized>(x: &Matrix, em: &EngineModel, exec: &E, trace: bool) -> Result<IntOutput> {
    let c = &em.config;
    if x.shape() != (c.n_channels, c.n_samples) {
        bail!(Shape, "window is {:?}, model expects ({}, {})", x.shape(), c.n_channels, c.n_samples);
    }
    let mut run = Run { sat: 0, state_sat: 0, state_updates: 0, trace: trace.then(BTreeMap::new) };
    let (t_len, d) = (c.n_tokens, c.d_model);

    let xq: Vec<i8> = x.data().iter().map(|&v| quantize_i8(v, em.n_input)).collect();
    run.dump(ActPoint::Input, c.n_channels, c.n_samples, &xq);

    let (ps, np) = (c.patch_size, c.n_patches());
    let pw = c.n_channels * ps;
    let mut patches = Vec::with_capacity(np * pw);
    for p in 0..np {
        for ch in 0..c.n_channels {
            patches.extend_from_slice(&xq[ch * c.n_samples + p * ps..ch * c.n_samples + (p + 1) * ps]);
        }
    }
    let g = c.groups();
    let acc = em.tokenizer.accumulate(&patches, np, exec);
    let mut tokens = vec![0i8; t_len * d];
    for p in 0..np {
        for o in 0..g * d {
            let t = p * g + o / d;
            let j = o % d;
            let v = em.tokenizer.requant[o].apply(acc[p * g * d + o]) + em.pos[t * d + j];
            tokens[t * d + j] = sat8(v, &mut run.sat);
        }
    }
    run.dump(ActPoint::Tokens, t_len, d, &tokens);

    let mut n_cur = em.tokenizer.n_out;
    for (block, eb) in em.blocks.iter().enumerate() {
        let f = run_branch(em, &eb.fwd, &tokens, block, Direction::Fwd, exec, &mut run)?;
        let b = run_branch(em, &eb.bwd, &tokens, block, Direction::Bwd, exec, &mut run)?;
        let (nf, nb, n_fuse) = (eb.fwd.out_proj.n_out, eb.bwd.out_proj.n_out, eb.n_fuse);
        let fused: Vec<i8> = match c.fusion {
            Fusion::Sum => f
                .iter()
                .zip(&b)
                .map(|(&x, &y)| sat8(align(x as i64, nf, n_fuse) + align(y as i64, nb, n_fuse), &mut run.sat))
                .collect(),
            Fusion::Mean => f
                .iter()
                .zip(&b)
                .map(|(&x, &y)| {
                    let s = align(x as i64, nf, n_fuse + 1) + align(y as i64, nb, n_fuse + 1);
                    sat8(rshift_round(s, 1), &mut run.sat)
                })
                .collect(),
            Fusion::ConcatProject => {
                let proj = eb.fuse_proj.as_ref().expect("loaded with projection");
                let n_cat = proj.n_in;
                let mut cat = Vec::with_capacity(t_len * 2 * d);
                for t in 0..t_len {
                    cat.extend(f[t * d..(t + 1) * d].iter().map(|&v| align(v as i64, nf, n_cat) as i8));
                    cat.extend(b[t * d..(t + 1) * d].iter().map(|&v| align(v as i64, nb, n_cat) as i8));
                }
                proj.forward(&cat, t_len, exec, &mut run.sat)
            }
        };
        run.dump(ActPoint::Fused(block), t_len, d, &fused);
        let next: Vec<i8> = tokens
            .iter()
            .zip(&fused)
            .map(|(&x, &y)| sat8(align(x as i64, n_cur, eb.n_out) + align(y as i64, n_fuse, eb.n_out), &mut run.sat))
            .collect();
        run.dump(ActPoint::BlockOut(block), t_len, d, &next);
        tokens = next;
        n_cur = eb.n_out;
    }

    let mut sums = vec![0i64; d];
    for t in 0..t_len {
        for (s, &v) in sums.iter_mut().zip(&tokens[t * d..(t + 1) * d]) {
            *s += v as i64;
        }
    }
    let pooled: Vec<i8> =
        sums.iter().map(|&s| sat8(div_round(align(s, n_cur, em.n_pool), t_len as i64), &mut run.sat)).collect();
    run.dump(ActPoint::Pooled, 1, d, &pooled);

    let acc = em.classifier.accumulate(&pooled, 1, exec);
    let logits_acc: Vec<i32> = acc.iter().map(|&a| a.clamp(i32::MIN as i64, i32::MAX as i64) as i32).collect();
    let logits = logits_acc.iter().zip(&em.classifier_scales).map(|(&a, s)| a as f64 * s * pow2(-em.n_pool)).collect();
    Ok(IntOutput {
        logits_acc,
        logits,
        saturations: run.sat,
        state_saturations: run.state_sat,
        state_updates: run.state_updates,
        trace: run.trace,
    })
}
