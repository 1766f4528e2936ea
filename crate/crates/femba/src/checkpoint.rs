//! Model files: float checkpoints, fake-quant checkpoints and integer
//! deployment images, all stored as `FMBC` containers.
//!
//! Every file carries `config` (the twelve integers of
//! [`ModelConfig::to_ints`]) and `meta = [kind, weight_bits]`.

use std::collections::BTreeMap;

use femba_core::model::{ActPoint, Direction, FembaWeights, LayerId, ModelConfig};
use femba_core::quant::{QBlock, QBranch, QLinear, QWeights, QuantMode, QuantModel};

use crate::container::{Container, DType, Entry, Scale};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Float = 0,
    Image = 1,
    FakeQuant = 2,
}

/// A decoded model file.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Float(FembaWeights),
    /// Float weights plus calibrated activation exponents.
    FakeQuant(FembaWeights, BTreeMap<ActPoint, i32>),
    Image(QuantModel),
}

fn mode_from_bits(bits: i32) -> Result<QuantMode> {
    match bits {
        8 => Ok(QuantMode::W8A8),
        4 => Ok(QuantMode::W4A8),
        2 => Ok(QuantMode::W2A8),
        b => Err(Error::Config(format!("no quantization mode with {b}-bit weights"))),
    }
}

fn header(c: &mut Container, cfg: &ModelConfig, kind: Kind, bits: i32) {
    c.push(Entry::i32("config", &[12], &cfg.to_ints()));
    c.push(Entry::i32("meta", &[2], &[kind as i32, bits]));
}

fn read_header(c: &Container) -> Result<(ModelConfig, Kind, i32)> {
    let cfg = ModelConfig::from_ints(&c.get("config")?.to_i32()?)?;
    let meta = c.get("meta")?.to_i32()?;
    if meta.len() != 2 {
        return Err(Error::Config("meta entry must hold two integers".into()));
    }
    let kind = match meta[0] {
        0 => Kind::Float,
        1 => Kind::Image,
        2 => Kind::FakeQuant,
        k => return Err(Error::Config(format!("unknown model kind {k}"))),
    };
    Ok((cfg, kind, meta[1]))
}

fn push_weights(c: &mut Container, w: &FembaWeights) {
    for t in w.named_tensors() {
        let v: Vec<f32> = t.data.iter().map(|&x| x as f32).collect();
        c.push(Entry::f32(&t.name, &t.dims, &v));
    }
}

fn read_weights(c: &Container, cfg: &ModelConfig) -> Result<FembaWeights> {
    let mut err = None;
    let w = FembaWeights::from_named(cfg, |name| match c.find(name).map(|e| e.to_f64()) {
        Some(Ok(v)) => Some(v),
        Some(Err(e)) => {
            err.get_or_insert(e);
            None
        }
        None => None,
    });
    match (w, err) {
        (_, Some(e)) => Err(e),
        (w, None) => Ok(w?),
    }
}

fn acts_entry(cfg: &ModelConfig, acts: &BTreeMap<ActPoint, i32>) -> Result<Entry> {
    let v = ActPoint::all(cfg)
        .iter()
        .map(|p| acts.get(p).copied().ok_or_else(|| Error::Config(format!("no exponent for {}", p.name()))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Entry::i32("acts", &[v.len()], &v))
}

fn read_acts(c: &Container, cfg: &ModelConfig) -> Result<BTreeMap<ActPoint, i32>> {
    let points = ActPoint::all(cfg);
    let v = c.get("acts")?.to_i32()?;
    if v.len() != points.len() {
        return Err(Error::Config(format!("acts holds {} exponents, expected {}", v.len(), points.len())));
    }
    Ok(points.into_iter().zip(v).collect())
}

pub fn encode_float(w: &FembaWeights) -> Container {
    let mut c = Container::new();
    header(&mut c, &w.config, Kind::Float, 32);
    push_weights(&mut c, w);
    c
}

pub fn encode_fake_quant(w: &FembaWeights, acts: &BTreeMap<ActPoint, i32>) -> Result<Container> {
    let mut c = Container::new();
    header(&mut c, &w.config, Kind::FakeQuant, 32);
    c.push(acts_entry(&w.config, acts)?);
    push_weights(&mut c, w);
    Ok(c)
}

fn branch_prefix(block: usize, dir: Direction) -> String {
    format!("blocks.{block}.{}", dir.name())
}

pub fn encode_image(m: &QuantModel) -> Result<Container> {
    m.validate()?;
    let cfg = &m.config;
    let mut c = Container::new();
    header(&mut c, cfg, Kind::Image, m.mode.weight_bits() as i32);
    c.push(acts_entry(cfg, &m.acts)?);
    c.push(Entry::i8("pos", &[cfg.n_tokens, cfg.d_model], &m.pos_q).with_scale(Scale::Pow2(m.n_pos as i8)));
    let ids = LayerId::all(cfg);
    let acc: Vec<i32> = ids.iter().map(|id| m.layer(*id).acc_bits as i32).collect();
    c.push(Entry::i32("acc_bits", &[acc.len()], &acc));
    for id in ids {
        let l = m.layer(id);
        let name = id.name();
        let dims = [l.rows, l.cols];
        let scales = Scale::PerChannel(l.scales.iter().map(|&s| s as f32).collect());
        let e = match &l.weights {
            QWeights::Int8(q) => Entry::i8(&format!("{name}.weight"), &dims, q),
            QWeights::Ternary(p) => Entry::t2(&format!("{name}.weight"), &dims, p),
        };
        c.push(e.with_scale(scales));
        if let Some(b) = &l.bias {
            c.push(Entry::i32(&format!("{name}.bias"), &[b.len()], b));
        }
    }
    for (bi, b) in m.blocks.iter().enumerate() {
        for dir in Direction::BOTH {
            let br = b.branch(dir);
            let p = branch_prefix(bi, dir);
            c.push(Entry::i8(&format!("{p}.a"), &[cfg.d_inner, cfg.d_state], &br.a_q).with_scale(Scale::Pow2(br.n_a as i8)));
            c.push(Entry::i8(&format!("{p}.d"), &[cfg.d_inner], &br.d_q).with_scale(Scale::Pow2(br.n_d as i8)));
            c.push(Entry::i32(&format!("{p}.softplus"), &[br.softplus.len()], &br.softplus));
        }
    }
    Ok(c)
}

fn pow2_of(e: &Entry) -> Result<i32> {
    match e.scale {
        Scale::Pow2(n) => Ok(n as i32),
        _ => Err(Error::Config(format!("{} needs a power-of-two scale", e.name))),
    }
}

fn read_linear(c: &Container, id: LayerId, bits: u32, acc_bits: u32) -> Result<QLinear> {
    let name = id.name();
    let we = c.get(&format!("{name}.weight"))?;
    if we.dims.len() != 2 {
        return Err(Error::Config(format!("{name}.weight must be rank 2")));
    }
    let (rows, cols) = (we.dims[0] as usize, we.dims[1] as usize);
    let weights = match we.dtype {
        DType::I8 => QWeights::Int8(we.to_i8()?),
        DType::T2 => QWeights::Ternary(we.to_t2()?),
        d => return Err(Error::Config(format!("{name}.weight has dtype {}", d.name()))),
    };
    let scales = match &we.scale {
        Scale::PerChannel(s) => s.iter().map(|&v| v as f64).collect(),
        _ => return Err(Error::Config(format!("{name}.weight needs per-channel scales"))),
    };
    let bias = c.find(&format!("{name}.bias")).map(|e| e.to_i32()).transpose()?;
    Ok(QLinear { rows, cols, bits, weights, scales, bias, acc_bits })
}

fn decode_image(c: &Container, cfg: ModelConfig, bits: i32) -> Result<QuantModel> {
    let mode = mode_from_bits(bits)?;
    let acts = read_acts(c, &cfg)?;
    let pos = c.get("pos")?;
    pos.expect_dims(&[cfg.n_tokens, cfg.d_model])?;
    let ids = LayerId::all(&cfg);
    let acc = c.get("acc_bits")?.to_i32()?;
    if acc.len() != ids.len() || acc.iter().any(|&a| a != 32 && a != 64) {
        return Err(Error::Config("acc_bits must list 32 or 64 for every layer".into()));
    }
    let acc: BTreeMap<LayerId, u32> = ids.iter().copied().zip(acc.into_iter().map(|a| a as u32)).collect();
    let lin = |id: LayerId| read_linear(c, id, mode.layer_bits(id), acc[&id]);
    let branch = |b: usize, dir: Direction| -> Result<QBranch> {
        let p = branch_prefix(b, dir);
        let l = |layer| lin(LayerId::Branch { block: b, dir, layer });
        use femba_core::model::BranchLayer as L;
        let a = c.get(&format!("{p}.a"))?;
        let d = c.get(&format!("{p}.d"))?;
        Ok(QBranch {
            in_proj: l(L::InProj)?,
            conv: l(L::Conv)?,
            x_proj: l(L::XProj)?,
            dt_proj: l(L::DtProj)?,
            out_proj: l(L::OutProj)?,
            a_q: a.to_i8()?,
            n_a: pow2_of(a)?,
            d_q: d.to_i8()?,
            n_d: pow2_of(d)?,
            softplus: c.get(&format!("{p}.softplus"))?.to_i32()?,
        })
    };
    let blocks = (0..cfg.n_blocks)
        .map(|b| {
            Ok(QBlock {
                fwd: branch(b, Direction::Fwd)?,
                bwd: branch(b, Direction::Bwd)?,
                fuse_proj: if cfg.fusion.has_projection() { Some(lin(LayerId::FuseProj(b))?) } else { None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = QuantModel {
        mode,
        tokenizer: lin(LayerId::Tokenizer)?,
        pos_q: pos.to_i8()?,
        n_pos: pow2_of(pos)?,
        blocks,
        classifier: lin(LayerId::Classifier)?,
        acts,
        config: cfg,
    };
    m.validate()?;
    Ok(m)
}

pub fn decode(c: &Container) -> Result<ModelFile> {
    let (cfg, kind, bits) = read_header(c)?;
    Ok(match kind {
        Kind::Float => ModelFile::Float(read_weights(c, &cfg)?),
        Kind::FakeQuant => {
            let acts = read_acts(c, &cfg)?;
            ModelFile::FakeQuant(read_weights(c, &cfg)?, acts)
        }
        Kind::Image => ModelFile::Image(decode_image(c, cfg, bits)?),
    })
}

pub fn encode(m: &ModelFile) -> Result<Container> {
    match m {
        ModelFile::Float(w) => Ok(encode_float(w)),
        ModelFile::FakeQuant(w, a) => encode_fake_quant(w, a),
        ModelFile::Image(q) => encode_image(q),
    }
}

/// Rounds every weight to `f32`, the precision float checkpoints are stored at.
pub fn round_to_f32(w: &FembaWeights) -> Result<FembaWeights> {
    read_weights(&encode_float(w), &w.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use femba_core::quant::{build_image, calibrate, CalibConfig};
    use femba_core::tensor::Matrix;

    fn image(mode: QuantMode, fusion: femba_core::model::Fusion) -> QuantModel {
        let cfg = ModelConfig { fusion, ..ModelConfig::micro() };
        let w = FembaWeights::random(&cfg, 3);
        let x = vec![Matrix::from_fn(cfg.n_channels, cfg.n_samples, |c, t| ((c * 7 + t) as f64 * 0.37).sin())];
        let s = calibrate(&w, &x, &CalibConfig::default()).unwrap();
        build_image(&w, &s, mode).unwrap()
    }

    #[test]
    fn image_round_trip() {
        use femba_core::model::Fusion;
        for fusion in [Fusion::Sum, Fusion::ConcatProject] {
            for mode in [QuantMode::W8A8, QuantMode::W4A8, QuantMode::W2A8] {
                let m = image(mode, fusion);
                let c = encode_image(&m).unwrap();
                let b = c.to_bytes();
                let back = decode(&Container::from_bytes(&b).unwrap()).unwrap();
                assert_eq!(back, ModelFile::Image(m.clone()));
                assert_eq!(encode(&back).unwrap().to_bytes(), b);
                let e = m.expand_ternary();
                assert_eq!(decode(&encode_image(&e).unwrap()).unwrap(), ModelFile::Image(e));
            }
        }
    }

    #[test]
    fn float_round_trip_at_f32() {
        let w = FembaWeights::random(&ModelConfig::micro(), 1);
        let r = round_to_f32(&w).unwrap();
        let c = encode_float(&r);
        assert_eq!(decode(&c).unwrap(), ModelFile::Float(r.clone()));
        assert_eq!(encode_float(&r).to_bytes(), c.to_bytes());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = image(QuantMode::W8A8, femba_core::model::Fusion::Sum);
        let mut c = encode_image(&m).unwrap();
        let i = c.entries.iter().position(|e| e.name == "classifier.bias").unwrap();
        c.entries[i] = Entry::i32("classifier.bias", &[1], &[0]);
        assert!(decode(&c).is_err());
        let mut c = encode_image(&m).unwrap();
        c.entries.retain(|e| e.name != "acts");
        assert!(matches!(decode(&c), Err(Error::Config(_))));
    }
}
