//! Gradient saliency: per-pixel input gradients of the deviation loss,
//! reduced across channels, pooled to a coarse grid, smoothed back to image
//! resolution with a tensor-product B-spline, min-max normalized and
//! thresholded into a binary mask.

use rand::Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{draw_patch_origins, two_heads_node, ModelState, PatchOrigins};
use crate::tensor::{Graph, Tensor};
use crate::train::loss::{deviation_loss_node, LossContext};

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyConfig {
    /// Side `g` of the pooling grid.
    pub grid_size: usize,
    /// Mask threshold `τ`: values at or above it are salient.
    pub threshold: f64,
    /// B-spline degree used for smoothing (3 = cubic).
    pub spline_order: usize,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            grid_size: 18,
            threshold: 0.4,
            spline_order: 3,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config(format!("grid_size must be >= 2, got {}", self.grid_size)));
        }
        check_threshold(self.threshold)
    }
}

fn check_threshold(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

/// Row-major 2-D scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Field2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Dimension(format!(
                "{height}x{width} field with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Normalized saliency values in `[0, 1]` at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap(pub Field2);

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    pub height: usize,
    pub width: usize,
    /// `true` marks a salient pixel.
    pub bits: Vec<bool>,
    pub salient_fraction: f64,
}

impl SaliencyMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} mask with {} bits",
                bits.len()
            )));
        }
        let salient_fraction = if bits.is_empty() {
            0.0
        } else {
            bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64
        };
        Ok(Self {
            height,
            width,
            bits,
            salient_fraction,
        })
    }

    pub fn filled(height: usize, width: usize, salient: bool) -> Self {
        Self::from_bits(height, width, vec![salient; height * width]).expect("consistent size")
    }

    pub fn non_salient_fraction(&self) -> f64 {
        1.0 - self.salient_fraction
    }
}

/// Gradient of the two-head deviation loss (label 0) with respect to the
/// pixels of each normal sample, parameters frozen. Patch origins are drawn
/// from `rng` as in a training forward pass.
pub fn input_gradients(
    model: &ModelState,
    samples: &[&Sample],
    ctx: &LossContext,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    if let Some(s) = samples.iter().find(|s| s.label != 0) {
        return Err(Error::Contract(format!(
            "saliency gradients need normal samples, {} is labeled anomalous",
            s.id
        )));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let fs = model.arch().feature_size();
    let origins = samples
        .iter()
        .map(|_| draw_patch_origins(fs, fs, rng))
        .collect::<Result<Vec<_>>>()?;
    input_gradients_with_origins(model, samples, ctx, &origins)
}

/// [`input_gradients`] with explicit per-sample patch origins.
pub fn input_gradients_with_origins(
    model: &ModelState,
    samples: &[&Sample],
    ctx: &LossContext,
    origins: &[PatchOrigins],
) -> Result<Vec<Tensor>> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let batch = Tensor::stack(&images)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let x = g.leaf(batch, true);
    let (phi1, phi2) = two_heads_node(&mut g, model.arch(), &bound, x, origins)?;
    let labels = vec![0u8; samples.len()];
    let per_sample = deviation_loss_node(&mut g, phi1, phi2, &labels, ctx)?;
    // Summing keeps each sample's gradient equal to that of its own loss.
    let loss = g.sum(per_sample)?;
    let mut grads = g.backward(loss)?;
    let grad = grads.take(x).expect("input leaf requires grad");
    (0..samples.len()).map(|i| grad.index_axis0(i)).collect()
}

/// `out[h,w] = sqrt(Σ_c grad[c,h,w]²)`.
pub fn channel_l2(grad: &Tensor) -> Result<Field2> {
    let (c, h, w) = match grad.shape() {
        &[c, h, w] if c > 0 => (c, h, w),
        other => return Err(Error::Dimension(format!("gradient must be [C,H,W], got {other:?}"))),
    };
    let plane = h * w;
    let data = (0..plane)
        .map(|p| {
            (0..c)
                .map(|ch| {
                    let v = grad.data()[ch * plane + p];
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Field2::new(h, w, data)
}

/// Bin boundaries partitioning `len` into `bins` runs; the trailing
/// `len % bins` runs are one longer.
fn bin_edges(len: usize, bins: usize) -> Vec<usize> {
    let base = len / bins;
    let longer_from = bins - len % bins;
    let mut edges = Vec::with_capacity(bins + 1);
    let mut pos = 0;
    edges.push(0);
    for b in 0..bins {
        pos += base + usize::from(b >= longer_from);
        edges.push(pos);
    }
    edges
}

/// Mean-pools a field onto a `g x g` grid.
pub fn downsample_to_grid(field: &Field2, g: usize) -> Result<Field2> {
    if g == 0 || g > field.height.min(field.width) {
        return Err(Error::Config(format!(
            "grid size {g} must lie in 1..={}",
            field.height.min(field.width)
        )));
    }
    let rows = bin_edges(field.height, g);
    let cols = bin_edges(field.width, g);
    let mut data = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let mut acc = 0.0;
            for y in rows[gy]..rows[gy + 1] {
                acc += field.data[y * field.width + cols[gx]..y * field.width + cols[gx + 1]]
                    .iter()
                    .sum::<f64>();
            }
            let count = (rows[gy + 1] - rows[gy]) * (cols[gx + 1] - cols[gx]);
            data.push(acc / count as f64);
        }
    }
    Field2::new(g, g, data)
}

/// Clamped uniform knot vector for `n` control points of degree `p`.
fn clamped_knots(n: usize, p: usize) -> Vec<f64> {
    let interior = n - p - 1;
    let mut knots = vec![0.0; p + 1];
    knots.extend((1..=interior).map(|j| j as f64 / (interior + 1) as f64));
    knots.extend(std::iter::repeat(1.0).take(p + 1));
    knots
}

/// Row-major `[samples, n]` matrix of B-spline basis values at `samples`
/// equally spaced parameters covering `[0, 1]` end to end.
pub(crate) fn bspline_basis_matrix(n: usize, samples: usize, degree: usize) -> Vec<f64> {
    let p = degree.min(n - 1);
    let knots = clamped_knots(n, p);
    let mut out = vec![0.0; samples * n];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    let mut basis = vec![0.0; p + 1];
    for i in 0..samples {
        let t = if samples == 1 {
            0.0
        } else {
            i as f64 / (samples - 1) as f64
        };
        // Knot span containing t; t = 1 belongs to the last non-empty span.
        let span = (p..n).rev().find(|&s| knots[s] <= t && (t < knots[s + 1] || s == n - 1)).unwrap_or(p);
        basis[0] = 1.0;
        for j in 1..=p {
            left[j] = t - knots[span + 1 - j];
            right[j] = knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = basis[r] / (right[r + 1] + left[j - r]);
                basis[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            basis[j] = saved;
        }
        for (j, b) in basis.iter().enumerate() {
            out[i * n + span - p + j] = *b;
        }
    }
    out
}

/// Tensor-product B-spline evaluation of a coarse grid at `height x width`
/// samples. Grid values act as control points over a clamped uniform knot
/// vector, so the output is a convex combination of grid values.
pub fn bspline_smooth(grid: &Field2, height: usize, width: usize, order: usize) -> Result<Field2> {
    if grid.height < 2 || grid.width < 2 {
        return Err(Error::Config(format!(
            "grid {}x{} too small to smooth",
            grid.height, grid.width
        )));
    }
    let by = bspline_basis_matrix(grid.height, height, order);
    let bx = bspline_basis_matrix(grid.width, width, order);
    // Rows first: tmp[y, gx] = Σ_gy by[y, gy] grid[gy, gx].
    let mut tmp = vec![0.0; height * grid.width];
    for y in 0..height {
        for gy in 0..grid.height {
            let wgt = by[y * grid.height + gy];
            if wgt == 0.0 {
                continue;
            }
            let src = &grid.data[gy * grid.width..(gy + 1) * grid.width];
            for (t, s) in tmp[y * grid.width..(y + 1) * grid.width].iter_mut().zip(src) {
                *t += wgt * s;
            }
        }
    }
    let mut data = vec![0.0; height * width];
    for y in 0..height {
        let row = &tmp[y * grid.width..(y + 1) * grid.width];
        for x in 0..width {
            let weights = &bx[x * grid.width..(x + 1) * grid.width];
            data[y * width + x] = weights.iter().zip(row).map(|(w, r)| w * r).sum();
        }
    }
    Field2::new(height, width, data)
}

/// `(x - min) / (max - min)`; a constant field maps to all zeros.
pub fn normalize_minmax(field: &Field2) -> SaliencyMap {
    let (lo, hi) = (field.min(), field.max());
    let data = if field.data.is_empty() || hi <= lo {
        vec![0.0; field.data.len()]
    } else {
        let span = hi - lo;
        field.data.iter().map(|v| (v - lo) / span).collect()
    };
    SaliencyMap(Field2 {
        height: field.height,
        width: field.width,
        data,
    })
}

/// Salient where `value >= tau`.
pub fn threshold_mask(map: &SaliencyMap, tau: f64) -> Result<SaliencyMask> {
    check_threshold(tau)?;
    let f = &map.0;
    SaliencyMask::from_bits(f.height, f.width, f.data.iter().map(|&v| v >= tau).collect())
}

/// Runs the reduction chain on a raw `[C,H,W]` gradient.
pub fn saliency_from_gradient(grad: &Tensor, cfg: &SaliencyConfig) -> Result<(SaliencyMap, SaliencyMask)> {
    cfg.validate()?;
    let magnitude = channel_l2(grad)?;
    let grid = downsample_to_grid(&magnitude, cfg.grid_size)?;
    let smooth = bspline_smooth(&grid, magnitude.height, magnitude.width, cfg.spline_order)?;
    let map = normalize_minmax(&smooth);
    let mask = threshold_mask(&map, cfg.threshold)?;
    Ok((map, mask))
}

/// Saliency maps and masks for a batch of normal samples.
pub fn saliency_for_samples(
    samples: &[&Sample],
    model: &ModelState,
    cfg: &SaliencyConfig,
    ctx: &LossContext,
    rng: &mut impl Rng,
) -> Result<Vec<(SaliencyMap, SaliencyMask)>> {
    cfg.validate()?;
    input_gradients(model, samples, ctx, rng)?
        .iter()
        .map(|g| saliency_from_gradient(g, cfg))
        .collect()
}

/// Mask of a single normal sample.
pub fn saliency_mask_for(
    sample: &Sample,
    model: &ModelState,
    cfg: &SaliencyConfig,
    ctx: &LossContext,
    rng: &mut impl Rng,
) -> Result<SaliencyMask> {
    let mut out = saliency_for_samples(&[sample], model, cfg, ctx, rng)?;
    Ok(out.pop().expect("one sample in, one mask out").1)
}
