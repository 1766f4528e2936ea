use super::*;
use proptest::prelude::*;
use rand::Rng;

fn spec(ratio: f64, mode: MaskMode, seed: u64) -> MaskSpec {
    MaskSpec { n_patches: N_PATCHES, patch_size: PATCH_SIZE, ratio, mode, seed }
}

fn params() -> LossParams {
    LossParams { beta: 1.0, unmasked_weight: 0.1, tau: 1.0, alpha: Vec::new(), gamma: 2.0 }
}

fn central(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let h = 1e-5;
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[i] += h;
    b[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        (analytic - numeric).abs() < 1e-10
    } else {
        (analytic - numeric).abs() / scale <= 1e-4
    }
}

#[test]
fn ratio_half_masks_forty_patches() {
    for mode in [MaskMode::Random, MaskMode::Clustered] {
        let m = gen_mask(&spec(0.5, mode, 3)).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 40);
    }
}

#[test]
fn clustered_forty_has_at_most_ten_runs() {
    for seed in 0..500 {
        let m = gen_mask(&spec(0.5, MaskMode::Clustered, seed)).unwrap();
        assert!(run_count(&m) <= 10, "seed {seed}: {}", run_count(&m));
    }
}

#[test]
fn mask_is_seed_deterministic() {
    let s = spec(0.55, MaskMode::Clustered, 9);
    assert_eq!(gen_mask(&s).unwrap(), gen_mask(&s).unwrap());
    let r = spec(0.55, MaskMode::Random, 9);
    assert_eq!(gen_mask(&r).unwrap(), gen_mask(&r).unwrap());
    assert_ne!(gen_mask(&r).unwrap(), gen_mask(&spec(0.55, MaskMode::Random, 10)).unwrap());
}

#[test]
fn mask_count_bounds_over_many_specs() {
    for seed in 0..100_000u64 {
        let mode = if seed % 2 == 0 { MaskMode::Random } else { MaskMode::Clustered };
        let s = MaskSpec::pretraining(mode, seed);
        assert!((0.5..=0.6).contains(&s.ratio));
        let m = gen_mask(&s).unwrap();
        let n = m.iter().filter(|&&b| b).count();
        assert!((40..=48).contains(&n), "seed {seed}: {n}");
        assert_eq!(n, s.count());
        if mode == MaskMode::Clustered {
            assert!(run_count(&m) <= n.div_ceil(4));
        }
    }
}

#[test]
fn random_mask_positions_are_roughly_uniform() {
    let mut hits = [0u32; N_PATCHES];
    for seed in 0..4000 {
        for (h, m) in hits.iter_mut().zip(gen_mask(&spec(0.5, MaskMode::Random, seed)).unwrap()) {
            *h += m as u32;
        }
    }
    // each patch is masked with probability 1/2; 4000 draws give sd ~ 32
    assert!(hits.iter().all(|&h| (1800..=2200).contains(&h)), "{hits:?}");
}

#[test]
fn sample_mask_layout() {
    let m = sample_mask(&[true, false], 2, 2);
    assert_eq!(m, [true, true, false, false, true, true, false, false]);
}

#[test]
fn invalid_mask_spec() {
    assert!(gen_mask(&spec(1.5, MaskMode::Random, 0)).is_err());
    assert!(gen_mask(&MaskSpec { n_patches: 0, ..spec(0.5, MaskMode::Random, 0) }).is_err());
}

#[test]
fn smooth_l1_hand_values() {
    let p = params();
    let same = smooth_l1(&[1.0, -2.0], &[1.0, -2.0], &p, &[true, false]).unwrap();
    assert_eq!(same.loss, 0.0);
    assert!(same.grad.iter().all(|&g| g == 0.0));
    let quad = smooth_l1(&[0.5], &[0.0], &p, &[true]).unwrap();
    assert!((quad.loss - 0.125).abs() < 1e-12);
    let lin = smooth_l1(&[2.0], &[0.0], &p, &[true]).unwrap();
    assert!((lin.loss - 1.5).abs() < 1e-12);
    let unmasked = smooth_l1(&[2.0], &[0.0], &p, &[false]).unwrap();
    assert!((unmasked.loss - 0.15).abs() < 1e-12);
    assert!(smooth_l1(&[1.0], &[1.0, 2.0], &p, &[true]).is_err());
}

#[test]
fn smooth_l1_is_c1_at_the_knee() {
    let p = LossParams { beta: 0.7, ..params() };
    let e = 1e-9;
    let lo = smooth_l1(&[0.7 - e], &[0.0], &p, &[true]).unwrap();
    let hi = smooth_l1(&[0.7 + e], &[0.0], &p, &[true]).unwrap();
    assert!((lo.loss - hi.loss).abs() < 1e-8);
    assert!((lo.grad[0] - hi.grad[0]).abs() < 1e-8);
}

#[test]
fn info_nce_hand_values() {
    let eye = |i: usize| Matrix::from_fn(1, 4, |_, c| (c == i) as u8 as f64);
    let a = eye(0);
    let none = Matrix::zeros(0, 4);
    assert!(info_nce(&a, &a, &none, 1.0).unwrap().loss.abs() < 1e-15);
    let mut neg = Matrix::zeros(3, 4);
    for j in 0..3 {
        neg.set(j, j + 1, 1.0);
    }
    let l = info_nce(&a, &a, &neg, 1.0).unwrap().loss;
    let e = core::f64::consts::E;
    assert!((l - -(e / (e + 3.0)).ln()).abs() < 1e-12);
    assert!((l - 0.7437).abs() < 1e-4);
}

#[test]
fn info_nce_scale_and_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rnd = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let (a, p, n) = (rnd(2, 5), rnd(2, 5), rnd(6, 5));
    let base = info_nce(&a, &p, &n, 0.3).unwrap().loss;
    let scale = |m: &Matrix, k: f64| Matrix::from_fn(m.rows(), m.cols(), |r, c| k * m.get(r, c));
    let scaled = info_nce(&scale(&a, 3.0), &scale(&p, 0.2), &scale(&n, 7.0), 0.3).unwrap().loss;
    assert!((base - scaled).abs() < 1e-12);
    // reverse negatives within each anchor's group
    let perm = Matrix::from_fn(6, 5, |r, c| n.get((r / 3) * 3 + 2 - r % 3, c));
    assert!((base - info_nce(&a, &p, &perm, 0.3).unwrap().loss).abs() < 1e-12);
}

#[test]
fn info_nce_non_negative_when_positive_wins() {
    let a = Matrix::from_vec(1, 3, vec![1.0, 0.2, 0.0]).unwrap();
    let n = Matrix::from_vec(2, 3, vec![-1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(info_nce(&a, &a, &n, 0.05).unwrap().loss >= 0.0);
}

#[test]
fn info_nce_zero_norm_is_numeric_error() {
    let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    let z = Matrix::zeros(1, 2);
    assert!(matches!(info_nce(&a, &z, &Matrix::zeros(0, 2), 1.0), Err(crate::Error::Numeric(_))));
}

#[test]
fn focal_hand_values() {
    let p = params();
    let one = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    assert_eq!(focal_loss(&one, &[0], &p).unwrap().loss, 0.0);
    let half = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
    let l = focal_loss(&half, &[1], &p).unwrap().loss;
    assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
    assert!((l - 0.17329).abs() < 1e-5);
    let ce = LossParams { gamma: 0.0, ..params() };
    let probs = Matrix::from_vec(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap();
    let got = focal_loss(&probs, &[2, 1], &ce).unwrap().loss;
    assert_eq!(got, -(0.5f64.ln() + 0.3f64.ln()) / 2.0);
}

#[test]
fn focal_clamps_zero_probability() {
    let probs = Matrix::from_vec(2, 2, vec![0.0, 1.0, 0.5, 0.5]).unwrap();
    let r = focal_loss(&probs, &[0, 0], &params()).unwrap();
    assert_eq!(r.clamped, 1);
    assert!(r.loss.is_finite());
    assert!(focal_loss(&probs, &[2, 0], &params()).is_err());
    let bad = LossParams { alpha: vec![0.5], ..params() };
    assert!(focal_loss(&probs, &[0, 0], &bad).is_err());
}

#[test]
fn focal_monotone_in_pt() {
    let p = LossParams { alpha: vec![0.25, 0.75], gamma: 1.5, ..params() };
    let mut prev = f64::INFINITY;
    for k in 1..=1000 {
        let pt = k as f64 / 1000.0;
        let m = Matrix::from_vec(1, 2, vec![1.0 - pt, pt]).unwrap();
        let l = focal_loss(&m, &[1], &p).unwrap().loss;
        assert!(l <= prev);
        prev = l;
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..8);
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let p = LossParams { beta: rng.random_range(0.1..2.0), ..params() };
        let g = smooth_l1(&pred, &target, &p, &mask).unwrap();
        let f = |x: &[f64]| smooth_l1(x, &target, &p, &mask).unwrap().loss;
        for i in 0..n {
            let num = central(f, &pred, i);
            assert!(close(g.grad[i], num), "smooth_l1 {} vs {num}", g.grad[i]);
        }

        let (b, k, d) = (rng.random_range(1..3), rng.random_range(0..4), rng.random_range(2..6));
        let mut rnd = |r: usize| Matrix::from_fn(r, d, |_, _| rng.random_range(-1.0..1.0));
        let (a, pos, neg) = (rnd(b), rnd(b), rnd(b * k));
        let tau = 0.5;
        let g = info_nce(&a, &pos, &neg, tau).unwrap();
        let fa = |x: &[f64]| info_nce(&Matrix::from_vec(b, d, x.to_vec()).unwrap(), &pos, &neg, tau).unwrap().loss;
        let fp = |x: &[f64]| info_nce(&a, &Matrix::from_vec(b, d, x.to_vec()).unwrap(), &neg, tau).unwrap().loss;
        let fnn = |x: &[f64]| info_nce(&a, &pos, &Matrix::from_vec(b * k, d, x.to_vec()).unwrap(), tau).unwrap().loss;
        for i in 0..b * d {
            assert!(close(g.d_anchor.data()[i], central(fa, a.data(), i)));
            assert!(close(g.d_positive.data()[i], central(fp, pos.data(), i)));
        }
        for i in 0..b * k * d {
            assert!(close(g.d_negative.data()[i], central(fnn, neg.data(), i)));
        }

        let c = rng.random_range(2..5);
        let probs = Matrix::from_fn(b, c, |_, _| rng.random_range(0.05..0.95));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let p = LossParams { gamma: rng.random_range(0.0..3.0), alpha: (0..c).map(|_| rng.random_range(0.1..1.0)).collect(), ..params() };
        let g = focal_loss(&probs, &labels, &p).unwrap();
        let f = |x: &[f64]| focal_loss(&Matrix::from_vec(b, c, x.to_vec()).unwrap(), &labels, &p).unwrap().loss;
        for i in 0..b * c {
            assert!(close(g.grad.data()[i], central(f, probs.data(), i)));
        }
    }
}

proptest! {
    #[test]
    fn clustered_runs_bounded(ratio in 0.0f64..=1.0, seed in any::<u64>(), n in 1usize..200) {
        let s = MaskSpec { n_patches: n, patch_size: 1, ratio, mode: MaskMode::Clustered, seed };
        let m = gen_mask(&s).unwrap();
        let count = m.iter().filter(|&&b| b).count();
        prop_assert_eq!(count, s.count());
        prop_assert!(run_count(&m) <= count.div_ceil(4));
    }

    #[test]
    fn smooth_l1_non_negative(d in proptest::collection::vec(-10.0f64..10.0, 1..20), beta in 0.01f64..5.0) {
        let p = LossParams { beta, ..params() };
        let zeros = vec![0.0; d.len()];
        let mask: Vec<bool> = (0..d.len()).map(|i| i % 3 == 0).collect();
        prop_assert!(smooth_l1(&d, &zeros, &p, &mask).unwrap().loss >= 0.0);
    }
}
