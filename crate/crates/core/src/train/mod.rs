//! Deviation-loss training over normals, seen anomalies and pseudo anomalies.

pub mod loss;

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{generate_cut_paste_pool, generate_pseudo_pool_items, MaskSource, PoolConfig, PseudoSample};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::auc_roc;
use crate::model::{draw_patch_origins, score_images, two_heads_node, ArchConfig, ModelState};
use crate::saliency::SaliencyConfig;
use crate::tensor::{Graph, Tensor};
pub use loss::{
    deviation, deviation_loss, deviation_loss_node, head_loss, prior_stats, DeviationConfig, HeadTargets, LossContext,
    PriorRedraw, PriorStats,
};

/// Source of the pseudo anomalies in each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    SaliencyCut,
    RandomCutPaste,
    None,
}

impl AugmentMode {
    pub fn name(self) -> &'static str {
        match self {
            AugmentMode::SaliencyCut => "saliencycut",
            AugmentMode::RandomCutPaste => "random_cut_paste",
            AugmentMode::None => "none",
        }
    }
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliencycut" => Ok(AugmentMode::SaliencyCut),
            "random_cut_paste" => Ok(AugmentMode::RandomCutPaste),
            "none" => Ok(AugmentMode::None),
            other => Err(Error::Config(format!(
                "unknown augmentation {other:?} (expected saliencycut, random_cut_paste, none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augmentation: AugmentMode,
    /// Pseudo samples per epoch; 0 means one per training normal.
    pub pool_size: usize,
    pub pool_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            epochs: 30,
            iterations_per_epoch: 20,
            batch_size: 48,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            augmentation: AugmentMode::SaliencyCut,
            pool_size: 0,
            pool_cap: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be positive and even, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Pool size for `normals` training normals.
    pub fn pool_count(&self, normals: usize) -> usize {
        let n = if self.pool_size == 0 { normals } else { self.pool_size };
        n.min(self.pool_cap)
    }
}

/// Which stratum a batch entry came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stratum {
    Normal,
    Seen,
    Pseudo,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub image: &'a Tensor,
    pub label: u8,
    pub stratum: Stratum,
    /// Index into the stratum's source list.
    pub index: usize,
}

/// Half normals; the other half split between seen and pseudo anomalies,
/// odd remainder to pseudo. An empty anomaly stratum hands its share to the
/// other one. Draws are with replacement within each stratum.
pub fn compose_batch<'a>(
    normals: &[&'a Sample],
    seen: &[&'a Sample],
    pseudo: &'a [PseudoSample],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BatchItem<'a>>> {
    if batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch_size must be even, got {batch_size}")));
    }
    if normals.is_empty() {
        return Err(Error::Data("cannot compose a batch without normal samples".into()));
    }
    let half = batch_size / 2;
    let (n_seen, n_pseudo) = match (seen.is_empty(), pseudo.is_empty()) {
        (false, false) => (half / 2, half - half / 2),
        (true, false) => (0, half),
        (false, true) => (half, 0),
        (true, true) => {
            return Err(Error::Data(
                "no anomalies to train on: no seen anomalies and no pseudo anomalies".into(),
            ))
        }
    };
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..half {
        let i = rng.gen_range(0..normals.len());
        batch.push(BatchItem {
            image: &normals[i].image,
            label: 0,
            stratum: Stratum::Normal,
            index: i,
        });
    }
    for _ in 0..n_seen {
        let i = rng.gen_range(0..seen.len());
        batch.push(BatchItem {
            image: &seen[i].image,
            label: 1,
            stratum: Stratum::Seen,
            index: i,
        });
    }
    for _ in 0..n_pseudo {
        let i = rng.gen_range(0..pseudo.len());
        batch.push(BatchItem {
            image: &pseudo[i].image,
            label: 1,
            stratum: Stratum::Pseudo,
            index: i,
        });
    }
    Ok(batch)
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &ModelState) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in model.params_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + weight_decay * *w;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub prior_mean: f64,
    pub prior_std: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub log: Vec<LogRow>,
    /// Validation AUC after each epoch, when a validation set was given.
    pub validation_auc: Vec<f64>,
    /// Pseudo samples used in the last epoch.
    pub pool_sizes: Vec<usize>,
}

/// Training inputs, already split.
#[derive(Clone, Debug, Default)]
pub struct TrainSet<'a> {
    pub normals: Vec<&'a Sample>,
    pub anomalies: Vec<&'a Sample>,
}

fn mean_loss_step(
    model: &ModelState,
    batch: &[BatchItem],
    ctx: &LossContext,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let fs = model.arch().feature_size();
    let images: Vec<&Tensor> = batch.iter().map(|b| b.image).collect();
    let labels: Vec<u8> = batch.iter().map(|b| b.label).collect();
    let origins = batch
        .iter()
        .map(|_| draw_patch_origins(fs, fs, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.constant(Tensor::stack(&images)?);
    let (phi1, phi2) = two_heads_node(&mut g, model.arch(), &bound, x, &origins)?;
    let per_sample = deviation_loss_node(&mut g, phi1, phi2, &labels, ctx)?;
    let loss = g.mean(per_sample)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let grads = bound
        .ids()
        .into_iter()
        .map(|id| grads.take(id).expect("parameter leaves require grad"))
        .collect();
    Ok((value, grads))
}

fn diverged(epoch: usize, iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            iteration,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Runs the full schedule. `validation` (if any) is scored after every epoch.
pub fn train(
    data: &TrainSet,
    cfg: &TrainConfig,
    dev: &DeviationConfig,
    sal: &SaliencyConfig,
    validation: Option<&[&Sample]>,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ModelState::init(cfg.arch.clone(), &mut rng)?;
    train_from(model, data, cfg, dev, sal, validation, &mut rng)
}

/// [`train`] starting from a given model and rng state.
pub fn train_from(
    mut model: ModelState,
    data: &TrainSet,
    cfg: &TrainConfig,
    dev: &DeviationConfig,
    sal: &SaliencyConfig,
    validation: Option<&[&Sample]>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dev.validate()?;
    sal.validate()?;
    if data.normals.is_empty() {
        return Err(Error::Data("training set has no normal samples".into()));
    }
    if cfg.augmentation == AugmentMode::None && data.anomalies.is_empty() {
        return Err(Error::Data(
            "augmentation none needs seen anomalies in the training set".into(),
        ));
    }
    let mut adam = Adam::new(&model);
    let mut log = Vec::new();
    let mut validation_auc = Vec::new();
    let mut pool_sizes = Vec::new();
    let pool_cfg = PoolConfig::default();
    for epoch in 0..cfg.epochs {
        let mut prior = prior_stats(rng, dev.prior_count)?;
        let ctx = |prior| LossContext {
            prior,
            margin: dev.margin,
            head_targets: dev.head_targets,
        };
        let count = cfg.pool_count(data.normals.len());
        let pool_seed: u64 = rng.gen();
        let pool: Vec<PseudoSample> = match cfg.augmentation {
            AugmentMode::SaliencyCut => {
                let c = ctx(prior);
                let source = MaskSource::Gradient {
                    model: &model,
                    cfg: sal,
                    ctx: &c,
                };
                generate_pseudo_pool_items(&data.normals, &source, &pool_cfg, count, pool_seed)
                    .map_err(|e| diverged(epoch, 0, e))?
                    .into_iter()
                    .map(|i| i.sample)
                    .collect()
            }
            AugmentMode::RandomCutPaste => generate_cut_paste_pool(&data.normals, count, pool_seed)?,
            AugmentMode::None => Vec::new(),
        };
        pool_sizes.push(pool.len());
        for iteration in 0..cfg.iterations_per_epoch {
            if dev.redraw == PriorRedraw::Iteration && iteration > 0 {
                prior = prior_stats(rng, dev.prior_count)?;
            }
            let batch = compose_batch(&data.normals, &data.anomalies, &pool, cfg.batch_size, rng)?;
            let (loss, grads) =
                mean_loss_step(&model, &batch, &ctx(prior), rng).map_err(|e| diverged(epoch, iteration, e))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    iteration,
                    detail: format!("loss is {loss}"),
                });
            }
            adam.step(&mut model, &grads, cfg.learning_rate, cfg.weight_decay);
            if let Some(p) = model.params().find(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    iteration,
                    detail: format!("parameter of shape {:?} became non-finite", p.shape()),
                });
            }
            log::debug!("epoch {epoch} iteration {iteration} loss {loss:.6}");
            log.push(LogRow {
                epoch,
                iteration,
                loss,
                prior_mean: prior.mean,
                prior_std: prior.std,
                seed: cfg.seed,
            });
        }
        if let Some(val) = validation {
            let images: Vec<&Tensor> = val.iter().map(|s| &s.image).collect();
            let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
            let scores: Vec<f64> = score_images(&images, &model)?
                .iter()
                .map(|h| h.anomaly_score())
                .collect();
            let auc = auc_roc(&scores, &labels)?;
            log::info!("epoch {epoch}: validation AUC {auc:.4}");
            validation_auc.push(auc);
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        validation_auc,
        pool_sizes,
    })
}
