use super::*;
use crate::model::{forward, BranchLayer, Direction, FembaWeights, LayerId, ModelConfig};
use crate::tensor::Matrix;

fn windows(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Matrix> {
    (0..n)
        .map(|k| {
            Matrix::from_fn(cfg.n_channels, cfg.n_samples, |c, t| {
                let ph = (seed * 11 + k as u64 * 5 + c as u64) as f64;
                0.8 * libm::sin(t as f64 * 0.21 + ph) + 0.2 * libm::sin(t as f64 * 1.7 + 2.0 * ph)
            })
        })
        .collect()
}

fn image(mode: QuantMode, seed: u64) -> (FembaWeights, QuantModel, Vec<Matrix>) {
    let cfg = ModelConfig::micro();
    let w = FembaWeights::random(&cfg, seed);
    let ws = windows(&cfg, 4, seed);
    let scales = calibrate(&w, &ws, &CalibConfig::default()).unwrap();
    let m = build_image(&w, &scales, mode).unwrap();
    (w, m, ws)
}

#[test]
fn image_shapes_and_modes() {
    for mode in [QuantMode::W8A8, QuantMode::W4A8, QuantMode::W2A8] {
        let (_, m, _) = image(mode, 1);
        m.validate().unwrap();
        for id in LayerId::all(&m.config) {
            let l = m.layer(id);
            let ternary = mode == QuantMode::W2A8 && id != LayerId::Classifier;
            assert_eq!(l.is_ternary(), ternary, "{}", id.name());
            let qmax = (1i32 << (mode.layer_bits(id) - 1)) - 1;
            assert!(l.expanded().iter().all(|&v| (v as i32).abs() <= qmax));
        }
        assert_eq!(QuantMode::from_name(mode.name()), Some(mode));
    }
}

#[test]
fn scan_parameters_are_exact_for_default_init() {
    let (_, m, _) = image(QuantMode::W8A8, 2);
    let br = &m.blocks[0].fwd;
    // A = -(s + 1) and D = 1 are representable exactly
    assert_eq!(br.n_a, 4);
    assert_eq!(br.a_q[0], -16);
    assert_eq!(br.a_q[3], -64);
    assert_eq!(br.n_d, 6);
    assert!(br.d_q.iter().all(|&v| v == 64));
}

#[test]
fn softplus_table_matches_formula() {
    let t = softplus_table(4);
    assert_eq!(t.len(), 256);
    // q = 0 → softplus(0) = ln 2
    assert_eq!(t[128], libm::round(core::f64::consts::LN_2 * 65536.0) as i32);
    // very negative inputs clamp at the minimum step
    let lo = softplus_table(15);
    assert_eq!(lo[0], libm::round(crate::lut::softplus(-128.0 / 32768.0) * 65536.0) as i32);
    assert!(t.windows(2).all(|p| p[0] <= p[1]));
}

#[test]
fn zero_window_zero_biases_gives_zero_logits() {
    let cfg = ModelConfig::micro();
    let mut w = FembaWeights::random(&cfg, 4);
    for id in LayerId::all(&cfg) {
        if let Some(b) = id.get_mut(&mut w).bias.as_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    w.pos_embed = Matrix::zeros(cfg.n_tokens, cfg.d_model);
    let ws = windows(&cfg, 2, 4);
    let scales = calibrate(&w, &ws, &CalibConfig::default()).unwrap();
    let m = build_image(&w, &scales, QuantMode::W8A8).unwrap();
    let out = reference_forward(&Matrix::zeros(cfg.n_channels, cfg.n_samples), &m, false).unwrap();
    // dt bias is zeroed too, so Δ = softplus(0) but u = 0 keeps h = 0
    assert!(out.logits_acc.iter().all(|&v| v == 0));
    assert!(out.logits.iter().all(|&v| v == 0.0));
}

#[test]
fn reference_tracks_fake_quant() {
    let (w, m, ws) = image(QuantMode::W8A8, 5);
    let scales = m.act_scales();
    for x in &ws {
        let int = reference_forward(x, &m, false).unwrap();
        let fq = fake_quant_forward(x, &w, &FakeQuantConfig::from_mode(QuantMode::W8A8), &scales).unwrap();
        let fl = forward(x, &w).unwrap();
        let scale = fl.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-3);
        for (a, b) in int.logits.iter().zip(&fq) {
            assert!((a - b).abs() <= 0.25 * scale + 0.05, "int {a} vs fake-quant {b}");
        }
        assert_eq!(int.state_updates as usize, 2 * 2 * m.config.n_tokens * m.config.d_inner * m.config.d_state);
    }
}

#[test]
fn trace_has_every_point() {
    let (_, m, ws) = image(QuantMode::W2A8, 6);
    let out = reference_forward(&ws[0], &m, true).unwrap();
    let tr = out.trace.unwrap();
    for p in crate::model::ActPoint::all(&m.config) {
        assert!(tr.contains_key(&p), "{}", p.name());
    }
    let h = &tr[&crate::model::ActPoint::Branch { block: 0, dir: Direction::Fwd, point: crate::model::BranchPoint::State }];
    assert_eq!((h.rows, h.cols), (m.config.d_inner, m.config.d_state));
}

#[test]
fn expanded_ternary_gives_identical_reference_logits() {
    let (_, m, ws) = image(QuantMode::W2A8, 7);
    let e = m.expand_ternary();
    assert!(LayerId::all(&m.config).iter().all(|id| !e.layer(*id).is_ternary()));
    for x in &ws {
        assert_eq!(reference_forward(x, &m, true).unwrap(), reference_forward(x, &e, true).unwrap());
    }
}

#[test]
fn validate_rejects_corrupt_images() {
    let (_, m, _) = image(QuantMode::W8A8, 8);
    let mut bad = m.clone();
    bad.acts.remove(&crate::model::ActPoint::Pooled);
    assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
    let mut bad = m.clone();
    bad.layer_mut(LayerId::Classifier).rows += 1;
    assert!(matches!(bad.validate(), Err(crate::Error::Shape(_))));
    let mut bad = m.clone();
    let id = LayerId::Branch { block: 0, dir: Direction::Fwd, layer: BranchLayer::XProj };
    bad.layer_mut(id).bias = Some(vec![i32::MAX; bad.layer(id).rows]);
    assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
    bad.layer_mut(id).acc_bits = 64;
    bad.validate().unwrap();
}

#[test]
fn full_shape_bounds_hold() {
    // largest fan-in of the deployed shapes: out_proj with 1540 inputs
    let cfg = ModelConfig::femba_tiny(2);
    let worst = LayerId::all(&cfg).into_iter().map(|id| expected_shape(&cfg, id).1).max().unwrap();
    assert_eq!(worst, 1540);
    assert!((worst as i64) * 127 * 127 < 1 << 31);
}

#[test]
fn storage_sizes() {
    let (_, m8, _) = image(QuantMode::W8A8, 9);
    let (_, m2, _) = image(QuantMode::W2A8, 9);
    assert!(m2.payload_bytes() < m8.payload_bytes());
}
