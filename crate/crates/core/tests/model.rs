use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliencycut::model::{
    backbone_forward, draw_patch_origins, forward_two_heads, forward_with_origins, inference_score, load_checkpoint,
    normal_head, patch_residual, quadrant_origins, save_checkpoint, score_images, split_patches, topk_count,
    topk_mean, topk_score, ArchConfig, ModelState, PatchSet,
};
use saliencycut::tensor::Tensor;
use saliencycut::Error;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_size: 16,
        in_channels: 3,
        channels: vec![4, 6],
        hidden: 5,
        k_fraction: 0.1,
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_patches(rng: &mut impl Rng) -> PatchSet {
    let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
    PatchSet {
        w1: random(&[1, c, h, w], rng),
        w2: random(&[1, c, h, w], rng),
        w3: random(&[1, c, h, w], rng),
        w4: random(&[1, c, h, w], rng),
        origins: [(0, 0); 4],
    }
}

#[test]
fn equal_patches_cancel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let p = random_patches(&mut rng);
        let same = PatchSet {
            w1: p.w1.clone(),
            w2: p.w1.clone(),
            w3: p.w1.clone(),
            w4: p.w1.clone(),
            origins: p.origins,
        };
        assert!(patch_residual(&same).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn residual_is_the_alternating_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let p = random_patches(&mut rng);
        let r = patch_residual(&p).unwrap();
        for i in 0..r.numel() {
            let want = p.w4.data()[i] - p.w3.data()[i] + p.w2.data()[i] - p.w1.data()[i];
            assert!((r.data()[i] - want).abs() <= 1e-15);
        }
    }
}

#[test]
fn residual_is_linear_and_odd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let combine = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
        Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()).unwrap()
    };
    for _ in 0..100 {
        let p = random_patches(&mut rng);
        let mut q = random_patches(&mut rng);
        for t in [&mut q.w1, &mut q.w2, &mut q.w3, &mut q.w4] {
            *t = random(p.w1.shape(), &mut rng);
        }
        let sum = PatchSet {
            w1: combine(&p.w1, &q.w1, &|a, b| a + b),
            w2: combine(&p.w2, &q.w2, &|a, b| a + b),
            w3: combine(&p.w3, &q.w3, &|a, b| a + b),
            w4: combine(&p.w4, &q.w4, &|a, b| a + b),
            origins: p.origins,
        };
        let (rp, rq, rs) = (patch_residual(&p).unwrap(), patch_residual(&q).unwrap(), patch_residual(&sum).unwrap());
        assert!(rs.max_abs_diff(&combine(&rp, &rq, &|a, b| a + b)) <= 1e-12);
        let neg = |t: &Tensor| combine(t, t, &|a, _| -a);
        let negated = PatchSet {
            w1: neg(&p.w1),
            w2: neg(&p.w2),
            w3: neg(&p.w3),
            w4: neg(&p.w4),
            origins: p.origins,
        };
        assert_eq!(patch_residual(&negated).unwrap(), neg(&rp));
    }
}

#[test]
fn patch_crops_follow_origins() {
    let features = Tensor::from_fn(&[1, 2, 4, 6], |i| i as f64);
    let p = PatchSet::from_origins(&features, [(0, 0), (2, 3), (1, 1), (0, 3)]).unwrap();
    assert_eq!(p.w1.shape(), &[1, 2, 2, 3]);
    // Channel 0 rows 2..4, columns 3..6.
    assert_eq!(&p.w2.data()[..6], &[15.0, 16.0, 17.0, 21.0, 22.0, 23.0]);
    assert!(matches!(
        PatchSet::from_origins(&Tensor::zeros(&[1, 1, 3, 4]), [(0, 0); 4]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        PatchSet::from_origins(&features, [(3, 0), (0, 0), (0, 0), (0, 0)]),
        Err(Error::Dimension(_))
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = split_patches(&features, &mut rng).unwrap();
    for (r, c) in p.origins {
        assert!(r <= 2 && c <= 3);
    }
}

#[test]
fn patch_origins_are_uniform() {
    // 8x8 map: each origin coordinate ranges over 0..=4, 25 cells.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 25];
    let draws = 10_000;
    for _ in 0..draws / 4 {
        for (r, c) in draw_patch_origins(8, 8, &mut rng).unwrap() {
            counts[r * 5 + c] += 1;
        }
    }
    let expected = draws as f64 / 25.0;
    let chi2: f64 = counts.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
    // 24 degrees of freedom, p = 0.001.
    assert!(chi2 < 51.18, "chi-square {chi2}");
    assert!(matches!(draw_patch_origins(7, 8, &mut rng), Err(Error::Contract(_))));
    assert_eq!(quadrant_origins(8, 6), [(0, 0), (0, 3), (4, 0), (4, 3)]);
}

fn sorted_oracle(values: &[f64], k_fraction: f64) -> f64 {
    let k = ((k_fraction * values.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[..k].iter().sum::<f64>() / k as f64
}

#[test]
fn topk_counts() {
    assert_eq!(topk_count(0.1, 64).unwrap(), 7);
    assert_eq!(topk_count(0.1, 30).unwrap(), 3);
    assert_eq!(topk_count(0.05, 4).unwrap(), 1);
    assert_eq!(topk_count(1.0, 16).unwrap(), 16);
    assert!(matches!(topk_count(0.0, 16), Err(Error::Config(_))));
    assert!(matches!(topk_count(1.5, 16), Err(Error::Config(_))));
    assert_eq!(topk_mean(&[1.0, 5.0, 3.0, 2.0], 0.5).unwrap(), 4.0);
    assert_eq!(topk_mean(&[2.0; 10], 0.3).unwrap(), 2.0);
}

#[test]
fn topk_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let len = rng.gen_range(1..200);
        let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        for k in [0.05, 0.1, 0.3, 1.0] {
            assert!((topk_mean(&v, k).unwrap() - sorted_oracle(&v, k)).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn topk_ignores_order(mut v in prop::collection::vec(-5.0f64..5.0, 1..60), k in 0.01f64..=1.0, seed in any::<u64>()) {
        let before = topk_mean(&v, k).unwrap();
        use rand::seq::SliceRandom;
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((topk_mean(&v, k).unwrap() - before).abs() <= 1e-12);
    }

    #[test]
    fn topk_is_monotone(v in prop::collection::vec(-5.0f64..5.0, 1..60), k in 0.01f64..=1.0, idx in any::<prop::sample::Index>(), bump in 0.0f64..3.0) {
        let before = topk_mean(&v, k).unwrap();
        let mut raised = v.clone();
        raised[idx.index(v.len())] += bump;
        prop_assert!(topk_mean(&raised, k).unwrap() >= before - 1e-12);
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(before <= max + 1e-12 && before >= mean - 1e-12);
    }
}

#[test]
fn normal_head_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let arch = tiny_arch();
    let mut state = ModelState::init(arch.clone(), &mut rng).unwrap();
    for p in state.normal_head_params_mut() {
        *p = random(p.shape(), &mut rng);
    }
    let fs = arch.feature_size();
    let features = Tensor::from_fn(&[1, arch.feature_channels(), fs, fs], |_| rng.gen_range(0.0..1.0));
    let [w1, b1, w2, b2] = [0, 1, 2, 3].map(|i| state.normal_head_params()[i].clone());
    let d = features.numel();
    let mut out = b2.data()[0];
    for j in 0..arch.hidden {
        let mut h = b1.data()[j];
        for i in 0..d {
            h += features.data()[i] * w1.data()[i * arch.hidden + j];
        }
        out += h.max(0.0) * w2.data()[j];
    }
    assert!((normal_head(&features, &state).unwrap() - out).abs() <= 1e-12);
    assert!(matches!(normal_head(&Tensor::zeros(&[1, 3]), &state), Err(Error::Dimension(_))));
}

#[test]
fn anomaly_head_is_projection_then_topk() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let arch = tiny_arch();
    let mut state = ModelState::init(arch.clone(), &mut rng).unwrap();
    state.anomaly_head_params_mut()[0] = random(&[1, 6, 1, 1], &mut rng);
    let residual = random(&[1, 6, 4, 4], &mut rng);
    let w = state.anomaly_head_params()[0].data().to_vec();
    let map: Vec<f64> = (0..16)
        .map(|p| (0..6).map(|c| residual.data()[c * 16 + p] * w[c]).sum())
        .collect();
    let got = topk_score(&residual, &state, 0.1).unwrap();
    assert!((got - sorted_oracle(&map, 0.1)).abs() <= 1e-12);
    assert!(matches!(topk_score(&Tensor::zeros(&[1, 5, 4, 4]), &state, 0.1), Err(Error::Dimension(_))));
}

#[test]
fn training_forward_resamples_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let state = ModelState::init(tiny_arch(), &mut rng).unwrap();
    let image = Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(0.0..1.0));
    let runs: Vec<f64> = (0..8)
        .map(|s| forward_two_heads(&image, &state, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().phi2)
        .collect();
    assert!(runs.iter().any(|&v| v != runs[0]), "phi2 never changed: {runs:?}");
    let phi1: Vec<f64> = (0..3)
        .map(|s| forward_two_heads(&image, &state, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().phi1)
        .collect();
    assert!(phi1.iter().all(|&v| v == phi1[0]));
    let first = inference_score(&image, &state).unwrap();
    assert_eq!(inference_score(&image, &state).unwrap(), first);
    let direct = forward_with_origins(&image, &state, quadrant_origins(8, 8)).unwrap();
    assert_eq!(direct.anomaly_score(), first);
}

#[test]
fn batched_scores_match_single_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let state = ModelState::init(tiny_arch(), &mut rng).unwrap();
    let images: Vec<Tensor> = (0..40).map(|_| Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(0.0..1.0))).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let batched = score_images(&refs, &state).unwrap();
    for (img, s) in images.iter().zip(&batched) {
        assert!((inference_score(img, &state).unwrap() - s.anomaly_score()).abs() <= 1e-12);
    }
}

#[test]
fn backbone_shapes_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let state = ModelState::init(tiny_arch(), &mut rng).unwrap();
    let f = backbone_forward(&Tensor::zeros(&[2, 3, 16, 16]), &state).unwrap();
    assert_eq!(f.shape(), &[2, 6, 8, 8]);
    assert!(matches!(backbone_forward(&Tensor::zeros(&[1, 1, 16, 16]), &state), Err(Error::Dimension(_))));
    let bad = ArchConfig {
        input_size: 12,
        channels: vec![4, 4, 4],
        ..tiny_arch()
    };
    assert!(matches!(ModelState::init(bad, &mut rng), Err(Error::Config(_))));
    let zero = ModelState::zeros(tiny_arch()).unwrap();
    assert_eq!(inference_score(&Tensor::full(&[3, 16, 16], 0.5), &zero).unwrap(), 0.0);
}

#[test]
fn checkpoints_round_trip_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let state = ModelState::init(tiny_arch(), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&state, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), state);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(load_checkpoint(&path).is_err());
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}
