//! Integer-semantics reference forward pass.
//!
//! Straight-line loops over the deployment image with every rounding and
//! saturation spelled out element by element. The integer engine must agree
//! with it bit for bit on every dumped tensor.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::image::{QLinear, QuantModel, DELTA_FRAC};
use crate::error::{bail, Result};
use crate::fixed::{align, div_round, pow2, quantize_i8, rshift_round, sat_i16, I8_MAX, I8_MIN};
use crate::lut::{Lut, LUT_IN_FRAC, SILU_OUT_FRAC};
use crate::model::{ActPoint, BranchPoint, Direction, Fusion};
use crate::tensor::Matrix;

/// Row-major integer tensor as it appears in an activation dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn from_i8(rows: usize, cols: usize, x: &[i8]) -> Self {
        Self { rows, cols, data: x.iter().map(|&v| v as i32).collect() }
    }

    pub fn from_i16(rows: usize, cols: usize, x: &[i16]) -> Self {
        Self { rows, cols, data: x.iter().map(|&v| v as i32).collect() }
    }
}

/// Per-point activations; branch tensors are in the branch's own time
/// order (reversed for the backward branch), the state entry is the final
/// hidden state `d_inner × d_state`.
pub type IntTrace = BTreeMap<ActPoint, IntTensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct IntOutput {
    /// Classifier accumulators, in units of `s_c·2^-n_pooled`.
    pub logits_acc: Vec<i32>,
    pub logits: Vec<f64>,
    /// Number of values clipped by a saturating conversion.
    pub saturations: u64,
    /// Q15 state updates that saturated.
    pub state_saturations: u64,
    /// Total scan state updates.
    pub state_updates: u64,
    pub trace: Option<IntTrace>,
}

struct Ctx {
    sat: u64,
    state_sat: u64,
    state_updates: u64,
    trace: Option<IntTrace>,
}

impl Ctx {
    fn s8(&mut self, x: i64) -> i8 {
        if !(I8_MIN..=I8_MAX).contains(&x) {
            self.sat += 1;
        }
        x.clamp(I8_MIN, I8_MAX) as i8
    }

    fn dump(&mut self, p: ActPoint, rows: usize, cols: usize, x: &[i8]) {
        if let Some(t) = self.trace.as_mut() {
            t.insert(p, IntTensor::from_i8(rows, cols, x));
        }
    }
}

fn dense(ctx: &mut Ctx, l: &QLinear, x: &[i8], t_len: usize, n_in: i32, n_out: i32) -> Result<Vec<i8>> {
    let mut out = Vec::with_capacity(t_len * l.rows);
    for t in 0..t_len {
        for r in 0..l.rows {
            let mut acc = l.bias_q(r);
            for c in 0..l.cols {
                acc += l.weight(r, c) as i64 * x[t * l.cols + c] as i64;
            }
            let v = l.requant(r, n_in, n_out)?.apply(acc);
            out.push(ctx.s8(v));
        }
    }
    Ok(out)
}

fn silu_q(ctx: &mut Ctx, lut: &Lut, q: i8, n_in: i32, n_out: i32) -> i8 {
    let y = lut.eval(align(q as i64, n_in, LUT_IN_FRAC as i32));
    ctx.s8(align(y as i64, SILU_OUT_FRAC as i32, n_out))
}

/// Integer forward pass of the image on one float window.
pub fn reference_forward(x: &Matrix, m: &QuantModel, trace: bool) -> Result<IntOutput> {
    let c = &m.config;
    if x.shape() != (c.n_channels, c.n_samples) {
        bail!(Shape, "window is {:?}, model expects ({}, {})", x.shape(), c.n_channels, c.n_samples);
    }
    m.validate()?;
    let silu = Lut::silu();
    let exp = Lut::exp();
    let mut ctx = Ctx { sat: 0, state_sat: 0, state_updates: 0, trace: trace.then(BTreeMap::new) };
    let (d, e, ns, r) = (c.d_model, c.d_inner, c.d_state, c.dt_rank);
    let t_len = c.n_tokens;

    let n_x = m.act(ActPoint::Input)?;
    let xq: Vec<i8> = x.data().iter().map(|&v| quantize_i8(v, n_x)).collect();
    ctx.dump(ActPoint::Input, c.n_channels, c.n_samples, &xq);

    // patches, channel-major within a row
    let ps = c.patch_size;
    let np = c.n_patches();
    let pw = c.n_channels * ps;
    let mut patches = vec![0i8; np * pw];
    for p in 0..np {
        for i in 0..pw {
            patches[p * pw + i] = xq[(i / ps) * c.n_samples + p * ps + i % ps];
        }
    }
    let n_tok = m.act(ActPoint::Tokens)?;
    let g = c.groups();
    let mut tokens = vec![0i8; t_len * d];
    for p in 0..np {
        for o in 0..g * d {
            let mut acc = m.tokenizer.bias_q(o);
            for i in 0..pw {
                acc += m.tokenizer.weight(o, i) as i64 * patches[p * pw + i] as i64;
            }
            let v = m.tokenizer.requant(o, n_x, n_tok)?.apply(acc);
            let t = p * g + o / d;
            let j = o % d;
            let pos = align(m.pos_q[t * d + j] as i64, m.n_pos, n_tok);
            tokens[t * d + j] = ctx.s8(v + pos);
        }
    }
    ctx.dump(ActPoint::Tokens, t_len, d, &tokens);

    let mut n_cur = n_tok;
    for (block, qb) in m.blocks.iter().enumerate() {
        let mut outs: Vec<(Vec<i8>, i32)> = Vec::with_capacity(2);
        for dir in Direction::BOTH {
            let br = qb.branch(dir);
            let pt = |point| ActPoint::Branch { block, dir, point };
            let xs: Vec<i8> = match dir {
                Direction::Fwd => tokens.clone(),
                Direction::Bwd => (0..t_len).rev().flat_map(|t| tokens[t * d..(t + 1) * d].iter().copied()).collect(),
            };

            let n_xz = m.act(pt(BranchPoint::Xz))?;
            let xz = dense(&mut ctx, &br.in_proj, &xs, t_len, n_cur, n_xz)?;
            ctx.dump(pt(BranchPoint::Xz), t_len, 2 * e, &xz);

            let n_conv = m.act(pt(BranchPoint::Conv))?;
            let k_len = c.d_conv;
            let mut conv = vec![0i8; t_len * e];
            for t in 0..t_len {
                for ch in 0..e {
                    let mut acc = br.conv.bias_q(ch);
                    for k in 0..k_len {
                        let src = t as isize - (k_len - 1 - k) as isize;
                        if src >= 0 {
                            acc += br.conv.weight(ch, k) as i64 * xz[src as usize * 2 * e + ch] as i64;
                        }
                    }
                    conv[t * e + ch] = ctx.s8(br.conv.requant(ch, n_xz, n_conv)?.apply(acc));
                }
            }
            ctx.dump(pt(BranchPoint::Conv), t_len, e, &conv);

            let n_u = m.act(pt(BranchPoint::U))?;
            let u: Vec<i8> = conv.iter().map(|&q| silu_q(&mut ctx, &silu, q, n_conv, n_u)).collect();
            ctx.dump(pt(BranchPoint::U), t_len, e, &u);

            let n_xd = m.act(pt(BranchPoint::XDbl))?;
            let xdbl = dense(&mut ctx, &br.x_proj, &u, t_len, n_u, n_xd)?;
            let w_xd = r + 2 * ns;
            ctx.dump(pt(BranchPoint::XDbl), t_len, w_xd, &xdbl);

            let dt_in: Vec<i8> = (0..t_len).flat_map(|t| xdbl[t * w_xd..t * w_xd + r].iter().copied()).collect();
            let n_dt = m.act(pt(BranchPoint::DtPre))?;
            let dt = dense(&mut ctx, &br.dt_proj, &dt_in, t_len, n_xd, n_dt)?;
            ctx.dump(pt(BranchPoint::DtPre), t_len, e, &dt);

            let n_h = m.act(pt(BranchPoint::State))?;
            let n_y = m.act(pt(BranchPoint::Y))?;
            let mut h = vec![0i16; e * ns];
            let mut y = vec![0i8; t_len * e];
            for t in 0..t_len {
                let bt = &xdbl[t * w_xd + r..t * w_xd + r + ns];
                let ct = &xdbl[t * w_xd + r + ns..t * w_xd + r + 2 * ns];
                for ch in 0..e {
                    let delta = br.softplus[(dt[t * e + ch] as i32 + 128) as usize] as i64;
                    let uq = u[t * e + ch] as i64;
                    for s in 0..ns {
                        let da = rshift_round(delta * br.a_q[ch * ns + s] as i64, br.n_a as u32);
                        let da = da.clamp(-16 * (1i64 << DELTA_FRAC), 0);
                        let abar = exp.eval(da) as i64;
                        let decay = rshift_round(abar * h[ch * ns + s] as i64, 15);
                        let prod = delta * bt[s] as i64 * uq;
                        let term = align(prod, DELTA_FRAC as i32 + n_xd + n_u, n_h);
                        let (hv, clipped) = sat_i16(decay + term);
                        h[ch * ns + s] = hv;
                        ctx.state_updates += 1;
                        if clipped {
                            ctx.state_sat += 1;
                            ctx.sat += 1;
                        }
                    }
                    let mut ch_acc = 0i64;
                    for s in 0..ns {
                        ch_acc += ct[s] as i64 * h[ch * ns + s] as i64;
                    }
                    let du = br.d_q[ch] as i64 * uq;
                    let (e1, e2) = (n_xd + n_h, br.n_d + n_u);
                    let top = e1.max(e2);
                    let sum = align(ch_acc, e1, top) + align(du, e2, top);
                    y[t * e + ch] = ctx.s8(align(sum, top, n_y));
                }
            }
            if let Some(tr) = ctx.trace.as_mut() {
                tr.insert(pt(BranchPoint::State), IntTensor::from_i16(e, ns, &h));
            }
            ctx.dump(pt(BranchPoint::Y), t_len, e, &y);

            let n_gate = m.act(pt(BranchPoint::Gate))?;
            let mut gate = vec![0i8; t_len * e];
            for t in 0..t_len {
                for ch in 0..e {
                    gate[t * e + ch] = silu_q(&mut ctx, &silu, xz[t * 2 * e + e + ch], n_xz, n_gate);
                }
            }
            ctx.dump(pt(BranchPoint::Gate), t_len, e, &gate);

            let n_gated = m.act(pt(BranchPoint::Gated))?;
            let gated: Vec<i8> = y
                .iter()
                .zip(&gate)
                .map(|(&a, &b)| {
                    let v = align(a as i64 * b as i64, n_y + n_gate, n_gated);
                    ctx.s8(v)
                })
                .collect();
            ctx.dump(pt(BranchPoint::Gated), t_len, e, &gated);

            let n_out = m.act(pt(BranchPoint::Out))?;
            let out = dense(&mut ctx, &br.out_proj, &gated, t_len, n_gated, n_out)?;
            ctx.dump(pt(BranchPoint::Out), t_len, d, &out);
            let out = match dir {
                Direction::Fwd => out,
                Direction::Bwd => (0..t_len).rev().flat_map(|t| out[t * d..(t + 1) * d].iter().copied()).collect(),
            };
            outs.push((out, n_out));
        }

        let n_fuse = m.act(ActPoint::Fused(block))?;
        let (f, nf) = (&outs[0].0, outs[0].1);
        let (b, nb) = (&outs[1].0, outs[1].1);
        let fused: Vec<i8> = match c.fusion {
            Fusion::Sum => {
                let mut v = Vec::with_capacity(t_len * d);
                for i in 0..t_len * d {
                    let s = align(f[i] as i64, nf, n_fuse) + align(b[i] as i64, nb, n_fuse);
                    v.push(ctx.s8(s));
                }
                v
            }
            Fusion::Mean => {
                let mut v = Vec::with_capacity(t_len * d);
                for i in 0..t_len * d {
                    let s = align(f[i] as i64, nf, n_fuse + 1) + align(b[i] as i64, nb, n_fuse + 1);
                    v.push(ctx.s8(rshift_round(s, 1)));
                }
                v
            }
            Fusion::ConcatProject => {
                let n_cat = nf.min(nb);
                let mut cat = Vec::with_capacity(t_len * 2 * d);
                for t in 0..t_len {
                    for j in 0..d {
                        cat.push(align(f[t * d + j] as i64, nf, n_cat) as i8);
                    }
                    for j in 0..d {
                        cat.push(align(b[t * d + j] as i64, nb, n_cat) as i8);
                    }
                }
                let proj = qb.fuse_proj.as_ref().expect("validated image has fuse_proj");
                dense(&mut ctx, proj, &cat, t_len, n_cat, n_fuse)?
            }
        };
        ctx.dump(ActPoint::Fused(block), t_len, d, &fused);

        let n_blk = m.act(ActPoint::BlockOut(block))?;
        let mut next = Vec::with_capacity(t_len * d);
        for i in 0..t_len * d {
            let s = align(tokens[i] as i64, n_cur, n_blk) + align(fused[i] as i64, n_fuse, n_blk);
            next.push(ctx.s8(s));
        }
        ctx.dump(ActPoint::BlockOut(block), t_len, d, &next);
        tokens = next;
        n_cur = n_blk;
    }

    let n_pool = m.act(ActPoint::Pooled)?;
    let mut pooled = vec![0i8; d];
    for j in 0..d {
        let mut sum = 0i64;
        for t in 0..t_len {
            sum += tokens[t * d + j] as i64;
        }
        let v = div_round(align(sum, n_cur, n_pool), t_len as i64);
        pooled[j] = ctx.s8(v);
    }
    ctx.dump(ActPoint::Pooled, 1, d, &pooled);

    let cls = &m.classifier;
    let mut logits_acc = Vec::with_capacity(cls.rows);
    let mut logits = Vec::with_capacity(cls.rows);
    for o in 0..cls.rows {
        let mut acc = cls.bias_q(o);
        for j in 0..d {
            acc += cls.weight(o, j) as i64 * pooled[j] as i64;
        }
        let acc = acc.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
        logits_acc.push(acc);
        logits.push(acc as f64 * cls.scales[o] * pow2(-n_pool));
    }
    Ok(IntOutput {
        logits_acc,
        logits,
        saturations: ctx.sat,
        state_saturations: ctx.state_sat,
        state_updates: ctx.state_updates,
        trace: ctx.trace,
    })
}
