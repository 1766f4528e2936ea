use femba_core::engine::{engine_forward, EngineModel, Sequential};
use femba_core::model::{forward, FembaWeights, ModelConfig};
use femba_core::quant::{build_image, calibrate, fake_quant_forward, reference_forward, CalibConfig, FakeQuantConfig, QuantMode};
use femba_core::signal::{preprocess, PreprocessConfig, RawRecording};
use femba_core::stream::{bench, CostModel, MemHierarchy};
use femba_core::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn windows(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Matrix::from_fn(cfg.n_channels, cfg.n_samples, |_, _| rng.random_range(-2.0..2.0))).collect()
}

#[test]
fn recording_to_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 512 * 12;
    let data = (0..22)
        .map(|c| (0..n).map(|t| (t as f64 * 0.02 * (c + 1) as f64).sin() * 30.0 + rng.random_range(-5.0..5.0)).collect())
        .collect();
    let out = preprocess(&RawRecording::new(data, 512.0).unwrap(), &PreprocessConfig::default()).unwrap();
    assert!(!out.is_empty());
    for p in &out {
        let m = p.window.data();
        assert_eq!((m.rows(), m.cols()), (22, 1280));
        assert!(m.data().iter().all(|v| v.is_finite()));
        assert_eq!(p.quartiles.len(), 22);
    }
}

#[test]
fn float_fake_quant_and_integer_paths_agree() {
    let cfg = ModelConfig::micro();
    let w = FembaWeights::random(&cfg, 5);
    let calib = windows(&cfg, 16, 6);
    let scales = calibrate(&w, &calib, &CalibConfig::default()).unwrap();
    let image = build_image(&w, &scales, QuantMode::W8A8).unwrap();
    let em = EngineModel::load(&image).unwrap();
    for x in windows(&cfg, 10, 7) {
        let fp = forward(&x, &w).unwrap();
        let fq = fake_quant_forward(&x, &w, &FakeQuantConfig::from_mode(QuantMode::W8A8), &scales).unwrap();
        let int = reference_forward(&x, &image, false).unwrap();
        let eng = engine_forward(&x, &em, &Sequential { parts: 3 }, false).unwrap();
        assert_eq!(int.logits_acc, eng.logits_acc);
        let spread = fp.iter().map(|v| v.abs()).fold(1e-3, f64::max);
        for ((a, b), c) in fp.iter().zip(&fq).zip(&int.logits) {
            assert!((a - b).abs() < 0.1 * spread, "float {a} fake-quant {b}");
            assert!((b - c).abs() < 0.1 * spread, "fake-quant {b} integer {c}");
        }
    }
}

#[test]
fn bench_scales_with_model_size() {
    let (cm, h) = (CostModel::default(), MemHierarchy::default());
    let tiny = bench(&ModelConfig::femba_tiny(2), &cm, &h).unwrap();
    let micro = bench(&ModelConfig::micro(), &cm, &h).unwrap();
    assert!(micro.total_cycles > 0.0 && micro.total_cycles < tiny.total_cycles);
    assert!(tiny.energy_j > micro.energy_j);
}
