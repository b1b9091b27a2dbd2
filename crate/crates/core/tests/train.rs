use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliencycut::augment::{PseudoSample, Provenance};
use saliencycut::data::Sample;
use saliencycut::model::{save_checkpoint, ArchConfig, ModelState};
use saliencycut::saliency::SaliencyConfig;
use saliencycut::tensor::{Graph, Tensor};
use saliencycut::train::{
    compose_batch, deviation, deviation_loss, deviation_loss_node, head_loss, prior_stats, train, Adam, AugmentMode,
    DeviationConfig, HeadTargets, LossContext, PriorStats, Stratum, TrainConfig, TrainSet,
};
use saliencycut::Error;

#[test]
fn loss_examples() {
    assert_eq!(deviation_loss(0.0, 0.0, 0, 5.0), 0.0);
    assert_eq!(deviation_loss(5.0, 5.0, 1, 5.0), 0.0);
    assert_eq!(deviation_loss(2.0, 2.0, 1, 5.0), 6.0);
    assert_eq!(head_loss(-1.5, 0, 5.0), 1.5);
    assert_eq!(head_loss(7.0, 1, 5.0), 0.0);
    assert_eq!(deviation(3.0, 1.0, 0.5).unwrap(), 4.0);
}

#[test]
fn prior_matches_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = prior_stats(&mut rng, 5000).unwrap();
    assert!(p.mean.abs() < 0.05 && (p.std - 1.0).abs() < 0.05, "{p:?}");
    let q = PriorStats::from_samples(&[1.0, 3.0]).unwrap();
    assert_eq!((q.mean, q.std), (2.0, 1.0));
    assert!(matches!(PriorStats::from_samples(&[1.0, 1.0]), Err(Error::Config(_))));
    assert!(matches!(prior_stats(&mut rng, 1), Err(Error::Config(_))));
}

fn phi_gradients(phi1: &[f64], phi2: &[f64], labels: &[u8], ctx: &LossContext) -> (Tensor, Tensor, Vec<f64>) {
    let n = labels.len();
    let mut g = Graph::new();
    let p1 = g.leaf(Tensor::new(vec![n], phi1.to_vec()).unwrap(), true);
    let p2 = g.leaf(Tensor::new(vec![n], phi2.to_vec()).unwrap(), true);
    let per = deviation_loss_node(&mut g, p1, p2, labels, ctx).unwrap();
    let values = g.value(per).data().to_vec();
    let total = g.sum(per).unwrap();
    let mut grads = g.backward(total).unwrap();
    (grads.take(p1).unwrap(), grads.take(p2).unwrap(), values)
}

#[test]
fn unmet_margin_gradient_is_minus_inverse_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for targets in [HeadTargets::Shared, HeadTargets::InvertedNormal] {
        for _ in 0..100 {
            let ctx = LossContext {
                prior: PriorStats {
                    mean: rng.gen_range(-0.1..0.1),
                    std: rng.gen_range(0.9..1.1),
                },
                margin: 5.0,
                head_targets: targets,
            };
            // Anomalies with both outputs well below the margin.
            let phi: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (g1, g2, _) = phi_gradients(&phi, &phi, &[1; 4], &ctx);
            for i in 0..4 {
                assert!((g2.data()[i] + 1.0 / ctx.prior.std).abs() <= 1e-12);
                let want1 = match targets {
                    HeadTargets::Shared => -1.0 / ctx.prior.std,
                    // Head one sees the sample as normal: d|dev|/dphi.
                    HeadTargets::InvertedNormal => (phi[i] - ctx.prior.mean).signum() / ctx.prior.std,
                };
                assert!((g1.data()[i] - want1).abs() <= 1e-12);
            }
            // Cleared margins contribute nothing.
            let high = vec![ctx.prior.mean + 6.0 * ctx.prior.std; 2];
            let (_, g2, _) = phi_gradients(&high, &high, &[1, 1], &ctx);
            assert!(g2.data().iter().all(|&v| v == 0.0));
        }
    }
}

proptest! {
    #[test]
    fn graph_loss_matches_scalar_formula(
        rows in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0, 0u8..2), 1..20),
        mean in -0.2f64..0.2,
        std in 0.8f64..1.2,
        shared in any::<bool>(),
    ) {
        let ctx = LossContext {
            prior: PriorStats { mean, std },
            margin: 5.0,
            head_targets: if shared { HeadTargets::Shared } else { HeadTargets::InvertedNormal },
        };
        let phi1: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let phi2: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.2).collect();
        let (_, _, values) = phi_gradients(&phi1, &phi2, &labels, &ctx);
        for (i, &y) in labels.iter().enumerate() {
            let d1 = (phi1[i] - mean) / std;
            let d2 = (phi2[i] - mean) / std;
            let y1 = if shared { y } else { 1 - y };
            let want = head_loss(d1, y1, 5.0) + head_loss(d2, y, 5.0);
            prop_assert!(values[i] >= 0.0);
            prop_assert!((values[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_is_non_negative(d1 in -50.0f64..50.0, d2 in -50.0f64..50.0, y in 0u8..2, margin in 0.1f64..10.0) {
        prop_assert!(deviation_loss(d1, d2, y, margin) >= 0.0);
    }
}

#[test]
fn loss_node_rejects_bad_inputs() {
    let ctx = LossContext {
        prior: PriorStats { mean: 0.0, std: 1.0 },
        margin: 5.0,
        head_targets: HeadTargets::Shared,
    };
    let mut g = Graph::new();
    let p = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(deviation_loss_node(&mut g, p, p, &[0, 1, 1], &ctx), Err(Error::Dimension(_))));
    assert!(matches!(deviation_loss_node(&mut g, p, p, &[0, 2], &ctx), Err(Error::Contract(_))));
}

fn sample(id: String, tag: &str, level: f64, rng: &mut impl Rng) -> Sample {
    let image = Tensor::from_fn(&[3, 16, 16], |_| (level + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
    Sample::new(id, image, tag).unwrap()
}

struct Toy {
    normals: Vec<Sample>,
    anomalies: Vec<Sample>,
}

fn toy() -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    Toy {
        normals: (0..12).map(|i| sample(format!("normal/{i}"), "normal", 0.3, &mut rng)).collect(),
        anomalies: (0..3).map(|i| sample(format!("bright/{i}"), "bright", 0.8, &mut rng)).collect(),
    }
}

fn toy_config(epochs: usize, iterations: usize) -> TrainConfig {
    TrainConfig {
        arch: ArchConfig {
            input_size: 16,
            in_channels: 3,
            channels: vec![4, 4],
            hidden: 4,
            k_fraction: 0.1,
        },
        epochs,
        iterations_per_epoch: iterations,
        batch_size: 8,
        pool_size: 6,
        ..TrainConfig::default()
    }
}

fn small_saliency() -> SaliencyConfig {
    SaliencyConfig {
        grid_size: 8,
        ..SaliencyConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let t = toy();
    let set = TrainSet {
        normals: t.normals.iter().collect(),
        anomalies: t.anomalies.iter().collect(),
    };
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..toy_config(2, 3)
    };
    let out = train(&set, &cfg, &DeviationConfig::default(), &small_saliency(), None).unwrap();
    let init = ModelState::init(cfg.arch.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    assert_eq!(out.model, init);
    assert_eq!(out.log.len(), 6);
    assert_eq!(out.pool_sizes, vec![6, 6]);
}

#[test]
fn training_is_deterministic() {
    let t = toy();
    let set = TrainSet {
        normals: t.normals.iter().collect(),
        anomalies: t.anomalies.iter().collect(),
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let out = train(&set, &toy_config(2, 4), &DeviationConfig::default(), &small_saliency(), None).unwrap();
        let path = dir.path().join(format!("{run}.ckpt"));
        save_checkpoint(&out.model, &path).unwrap();
        bytes.push(std::fs::read(path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn loss_decreases_over_fifty_steps() {
    let t = toy();
    let set = TrainSet {
        normals: t.normals.iter().collect(),
        anomalies: t.anomalies.iter().collect(),
    };
    for mode in [AugmentMode::SaliencyCut, AugmentMode::RandomCutPaste, AugmentMode::None] {
        let cfg = TrainConfig {
            augmentation: mode,
            learning_rate: 1e-2,
            ..toy_config(5, 10)
        };
        let out = train(&set, &cfg, &DeviationConfig::default(), &small_saliency(), None).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
        assert_eq!(losses.len(), 50);
        let head = losses[..5].iter().sum::<f64>() / 5.0;
        let tail = losses[45..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{mode:?}: {head} -> {tail}");
        assert!(losses.iter().all(|&l| l >= 0.0 && l.is_finite()));
    }
}

#[test]
fn validation_auc_is_tracked() {
    let t = toy();
    let set = TrainSet {
        normals: t.normals[..8].iter().collect(),
        anomalies: t.anomalies[..1].iter().collect(),
    };
    let val: Vec<&Sample> = t.normals[8..].iter().chain(&t.anomalies[1..]).collect();
    let out = train(&set, &toy_config(3, 2), &DeviationConfig::default(), &small_saliency(), Some(&val)).unwrap();
    assert_eq!(out.validation_auc.len(), 3);
    assert!(out.validation_auc.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn training_input_errors() {
    let t = toy();
    let dev = DeviationConfig::default();
    let sal = small_saliency();
    let empty = TrainSet {
        normals: vec![],
        anomalies: t.anomalies.iter().collect(),
    };
    assert!(matches!(train(&empty, &toy_config(1, 1), &dev, &sal, None), Err(Error::Data(_))));
    let no_anomalies = TrainSet {
        normals: t.normals.iter().collect(),
        anomalies: vec![],
    };
    let none = TrainConfig {
        augmentation: AugmentMode::None,
        ..toy_config(1, 1)
    };
    assert!(matches!(train(&no_anomalies, &none, &dev, &sal, None), Err(Error::Data(_))));
    let odd = TrainConfig {
        batch_size: 7,
        ..toy_config(1, 1)
    };
    assert!(matches!(train(&no_anomalies, &odd, &dev, &sal, None), Err(Error::Config(_))));
    let huge = TrainConfig {
        learning_rate: 1e300,
        augmentation: AugmentMode::RandomCutPaste,
        ..toy_config(2, 5)
    };
    assert!(matches!(train(&no_anomalies, &huge, &dev, &sal, None), Err(Error::Divergence { .. })));
}

#[test]
fn pool_size_defaults_to_normals_and_caps() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.pool_count(140), 140);
    assert_eq!(cfg.pool_count(2000), 512);
    let fixed = TrainConfig {
        pool_size: 30,
        ..TrainConfig::default()
    };
    assert_eq!(fixed.pool_count(140), 30);
}

fn pseudo(n: usize) -> Vec<PseudoSample> {
    (0..n)
        .map(|i| PseudoSample {
            image: Tensor::full(&[1, 2, 2], i as f64 / n as f64),
            provenance: Provenance {
                source_a: "a".into(),
                source_b: "b".into(),
                salient_fraction: 0.5,
                seed: i as u64,
                rect: None,
            },
        })
        .collect()
}

#[test]
fn batch_composition_counts_and_reproducibility() {
    let normals: Vec<Sample> = (0..7)
        .map(|i| Sample::new(format!("n{i}"), Tensor::zeros(&[1, 2, 2]), "normal").unwrap())
        .collect();
    let seen: Vec<Sample> = (0..3)
        .map(|i| Sample::new(format!("s{i}"), Tensor::full(&[1, 2, 2], 1.0), "cut").unwrap())
        .collect();
    let pool = pseudo(5);
    let (nr, sr): (Vec<&Sample>, Vec<&Sample>) = (normals.iter().collect(), seen.iter().collect());
    for batch_size in [2, 4, 10, 48] {
        let b = compose_batch(&nr, &sr, &pool, batch_size, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let count = |s| b.iter().filter(|i| i.stratum == s).count();
        let half = batch_size / 2;
        assert_eq!(count(Stratum::Normal), half);
        assert_eq!(count(Stratum::Seen), half / 2);
        assert_eq!(count(Stratum::Pseudo), half - half / 2);
        for item in &b {
            assert_eq!(item.label, u8::from(item.stratum != Stratum::Normal));
        }
        let again = compose_batch(&nr, &sr, &pool, batch_size, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let key = |b: &[saliencycut::train::BatchItem]| b.iter().map(|i| (i.stratum, i.index)).collect::<Vec<_>>();
        assert_eq!(key(&b), key(&again));
    }
    let b = compose_batch(&nr, &sr, &[], 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(b.iter().filter(|i| i.stratum == Stratum::Seen).count(), 4);
    assert!(matches!(compose_batch(&nr, &[], &[], 8, &mut ChaCha8Rng::seed_from_u64(5)), Err(Error::Data(_))));
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch = toy_config(1, 1).arch;
    let mut model = ModelState::init(arch, &mut rng).unwrap();
    let before = model.clone();
    let grads: Vec<Tensor> = model.params().map(|p| Tensor::from_fn(p.shape(), |_| rng.gen_range(-1.0..1.0))).collect();
    let mut adam = Adam::new(&model);
    adam.step(&mut model, &grads, 0.01, 0.0);
    for ((new, old), g) in model.params().zip(before.params()).zip(&grads) {
        for ((w, w0), g) in new.data().iter().zip(old.data()).zip(g.data()) {
            let want = w0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((w - want).abs() <= 1e-15);
        }
    }
}
