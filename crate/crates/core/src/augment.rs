//! Pseudo-anomaly synthesis: saliency-guided composition of two normal
//! images, and an unguided rectangle cut-paste for comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::synth::sample_seed;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{draw_patch_origins, ModelState, PatchOrigins};
use crate::saliency::{input_gradients_with_origins, saliency_from_gradient, SaliencyConfig, SaliencyMap, SaliencyMask};
use crate::tensor::Tensor;
use crate::train::loss::LossContext;

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub source_a: String,
    pub source_b: String,
    /// Fraction of pixels taken from the partner (mask or rectangle area).
    pub salient_fraction: f64,
    pub seed: u64,
    pub rect: Option<Rect>,
}

/// A composed training image; always labeled anomalous.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSample {
    pub image: Tensor,
    pub provenance: Provenance,
}

impl PseudoSample {
    pub const LABEL: u8 = 1;

    pub fn label(&self) -> u8 {
        Self::LABEL
    }
}

fn check_pair(x_a: &Sample, x_b: &Sample) -> Result<()> {
    for s in [x_a, x_b] {
        if !s.is_normal() {
            return Err(Error::Contract(format!(
                "pseudo anomalies are built from normal samples, {} is anomalous",
                s.id
            )));
        }
    }
    if x_a.image.shape() != x_b.image.shape() {
        return Err(Error::Dimension(format!(
            "source shapes differ: {:?} vs {:?}",
            x_a.image.shape(),
            x_b.image.shape()
        )));
    }
    Ok(())
}

/// Per-pixel selection: `x_b` where `pick(pixel)` holds, `x_a` elsewhere.
fn compose(x_a: &Tensor, x_b: &Tensor, pick: impl Fn(usize) -> bool) -> Tensor {
    let shape = x_a.shape();
    let plane = shape[1] * shape[2];
    Tensor::from_fn(shape, |i| {
        if pick(i % plane) {
            x_b.data()[i]
        } else {
            x_a.data()[i]
        }
    })
}

/// Keeps `x_a` on non-salient pixels and takes `x_b` on salient ones.
pub fn saliency_cut(x_a: &Sample, mask: &SaliencyMask, x_b: &Sample) -> Result<PseudoSample> {
    check_pair(x_a, x_b)?;
    let shape = x_a.image.shape();
    if mask.height != shape[1] || mask.width != shape[2] {
        return Err(Error::Dimension(format!(
            "mask {}x{} does not match image {:?}",
            mask.height, mask.width, shape
        )));
    }
    Ok(PseudoSample {
        image: compose(&x_a.image, &x_b.image, |p| mask.bits[p]),
        provenance: Provenance {
            source_a: x_a.id.clone(),
            source_b: x_b.id.clone(),
            salient_fraction: mask.salient_fraction,
            seed: 0,
            rect: None,
        },
    })
}

/// Rectangle covering `area_fraction` of an `height × width` image at a uniform position.
pub fn draw_rect(height: usize, width: usize, area_fraction: f64, rng: &mut impl Rng) -> Rect {
    let area = area_fraction * (height * width) as f64;
    let aspect: f64 = rng.gen_range(0.5..2.0);
    let w = ((area * aspect).sqrt().round() as usize).clamp(1, width);
    let h = ((area / w as f64).round() as usize).clamp(1, height);
    let x0 = rng.gen_range(0..=width - w);
    let y0 = rng.gen_range(0..=height - h);
    Rect {
        x0,
        y0,
        width: w,
        height: h,
    }
}

/// Copies `rect` of `x_a` into `x_b`.
pub fn cut_paste_rect(x_a: &Sample, x_b: &Sample, rect: Rect) -> Result<PseudoSample> {
    check_pair(x_a, x_b)?;
    let w = x_a.image.shape()[2];
    let area = (rect.width * rect.height) as f64 / (x_a.image.shape()[1] * w) as f64;
    Ok(PseudoSample {
        image: compose(&x_b.image, &x_a.image, |p| rect.contains(p % w, p / w)),
        provenance: Provenance {
            source_a: x_a.id.clone(),
            source_b: x_b.id.clone(),
            salient_fraction: area,
            seed: 0,
            rect: Some(rect),
        },
    })
}

/// Area fraction drawn from `[0.02, 0.3]`.
pub fn random_cut_paste(x_a: &Sample, x_b: &Sample, rng: &mut impl Rng) -> Result<PseudoSample> {
    let fraction = rng.gen_range(0.02..=0.3);
    random_cut_paste_with_area(x_a, x_b, fraction, rng)
}

/// [`random_cut_paste`] with the area fraction fixed by the caller.
pub fn random_cut_paste_with_area(x_a: &Sample, x_b: &Sample, area_fraction: f64, rng: &mut impl Rng) -> Result<PseudoSample> {
    if !(area_fraction > 0.0 && area_fraction <= 1.0) {
        return Err(Error::Config(format!("area fraction must lie in (0, 1], got {area_fraction}")));
    }
    let s = x_a.image.shape();
    let rect = draw_rect(s[1], s[2], area_fraction, rng);
    cut_paste_rect(x_a, x_b, rect)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolConfig {
    /// Accepted band for the non-salient pixel fraction of a mask.
    pub min_non_salient: f64,
    pub max_non_salient: f64,
    /// Redraws per slot after the first attempt.
    pub max_retries: usize,
    /// Gradient batch size.
    pub chunk: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            min_non_salient: 0.01,
            max_non_salient: 0.99,
            max_retries: 10,
            chunk: 32,
        }
    }
}

/// Two distinct indices in `0..n`, uniform over ordered pairs.
fn draw_pair(n: usize, rng: &mut impl Rng) -> (usize, usize) {
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// One pool entry plus the map that produced its mask (when saliency-guided).
#[derive(Clone, Debug)]
pub struct PoolItem {
    pub sample: PseudoSample,
    pub saliency: Option<(SaliencyMap, SaliencyMask)>,
}

/// How masks are obtained for a saliency-guided pool.
pub enum MaskSource<'a> {
    Gradient {
        model: &'a ModelState,
        cfg: &'a SaliencyConfig,
        ctx: &'a LossContext,
    },
    /// Replaces every mask with a constant one.
    Fixed(bool),
}

struct Slot {
    index: usize,
    rng: ChaCha8Rng,
    seed: u64,
    attempts: usize,
}

/// Builds `count` saliency-guided pseudo samples from `normals`.
///
/// Each slot owns an rng derived from `pool_seed`, so results do not depend
/// on batching. Masks whose non-salient fraction falls outside the band are
/// redrawn; a slot that keeps failing is dropped with a warning.
pub fn generate_pseudo_pool_items(
    normals: &[&Sample],
    source: &MaskSource,
    pool: &PoolConfig,
    count: usize,
    pool_seed: u64,
) -> Result<Vec<PoolItem>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if normals.len() < 2 {
        return Err(Error::Data(format!(
            "pseudo anomalies need at least 2 normal samples, got {}",
            normals.len()
        )));
    }
    let mut done: Vec<Option<PoolItem>> = vec![None; count];
    let mut pending: Vec<Slot> = (0..count)
        .map(|index| {
            let seed = sample_seed(pool_seed, index as u64);
            Slot {
                index,
                rng: ChaCha8Rng::seed_from_u64(seed),
                seed,
                attempts: 0,
            }
        })
        .collect();
    while !pending.is_empty() {
        let draws: Vec<(usize, usize, Option<PatchOrigins>)> = pending
            .iter_mut()
            .map(|slot| {
                slot.attempts += 1;
                let (a, b) = draw_pair(normals.len(), &mut slot.rng);
                let origins = match source {
                    MaskSource::Gradient { model, .. } => {
                        let fs = model.arch().feature_size();
                        Some(draw_patch_origins(fs, fs, &mut slot.rng)?)
                    }
                    MaskSource::Fixed(_) => None,
                };
                Ok((a, b, origins))
            })
            .collect::<Result<_>>()?;
        let masks = attempt_masks(normals, source, pool, &draws)?;
        let mut still = Vec::new();
        for ((slot, (a, b, _)), (map, mask)) in pending.into_iter().zip(draws).zip(masks) {
            let frac = mask.non_salient_fraction();
            let accept = matches!(source, MaskSource::Fixed(_))
                || (frac >= pool.min_non_salient && frac <= pool.max_non_salient);
            if accept {
                let mut sample = saliency_cut(normals[a], &mask, normals[b])?;
                sample.provenance.seed = slot.seed;
                done[slot.index] = Some(PoolItem {
                    sample,
                    saliency: Some((map, mask)),
                });
            } else if slot.attempts > pool.max_retries {
                log::warn!(
                    "pseudo slot {} skipped: non-salient fraction {frac:.4} outside [{}, {}] after {} attempts",
                    slot.index,
                    pool.min_non_salient,
                    pool.max_non_salient,
                    slot.attempts
                );
            } else {
                still.push(slot);
            }
        }
        pending = still;
    }
    Ok(done.into_iter().flatten().collect())
}

fn attempt_masks(
    normals: &[&Sample],
    source: &MaskSource,
    pool: &PoolConfig,
    draws: &[(usize, usize, Option<PatchOrigins>)],
) -> Result<Vec<(SaliencyMap, SaliencyMask)>> {
    match source {
        MaskSource::Fixed(bit) => Ok(draws
            .iter()
            .map(|&(a, _, _)| {
                let s = normals[a].image.shape();
                let (h, w) = (s[1], s[2]);
                let value = if *bit { 1.0 } else { 0.0 };
                (
                    SaliencyMap(crate::saliency::Field2::constant(h, w, value)),
                    SaliencyMask::filled(h, w, *bit),
                )
            })
            .collect()),
        MaskSource::Gradient { model, cfg, ctx } => {
            let mut out = Vec::with_capacity(draws.len());
            for chunk in draws.chunks(pool.chunk.max(1)) {
                let samples: Vec<&Sample> = chunk.iter().map(|&(a, _, _)| normals[a]).collect();
                let origins: Vec<PatchOrigins> = chunk.iter().map(|d| d.2.expect("gradient draws carry origins")).collect();
                for grad in input_gradients_with_origins(model, &samples, ctx, &origins)? {
                    out.push(saliency_from_gradient(&grad, cfg)?);
                }
            }
            Ok(out)
        }
    }
}

/// Saliency-guided pool without the per-item maps.
pub fn generate_pseudo_pool(
    normals: &[&Sample],
    model: &ModelState,
    cfg: &SaliencyConfig,
    ctx: &LossContext,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PseudoSample>> {
    let source = MaskSource::Gradient { model, cfg, ctx };
    let items = generate_pseudo_pool_items(normals, &source, &PoolConfig::default(), count, rng.gen())?;
    Ok(items.into_iter().map(|i| i.sample).collect())
}

/// Unguided pool: each slot copies a random rectangle from one normal into another.
pub fn generate_cut_paste_pool(normals: &[&Sample], count: usize, pool_seed: u64) -> Result<Vec<PseudoSample>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if normals.len() < 2 {
        return Err(Error::Data(format!(
            "pseudo anomalies need at least 2 normal samples, got {}",
            normals.len()
        )));
    }
    (0..count)
        .map(|index| {
            let seed = sample_seed(pool_seed, index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = draw_pair(normals.len(), &mut rng);
            let mut s = random_cut_paste(normals[a], normals[b], &mut rng)?;
            s.provenance.seed = seed;
            Ok(s)
        })
        .collect()
}
