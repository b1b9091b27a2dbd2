//! The scoring network: a small convolutional backbone, a normal learning
//! head (two-layer MLP over the flattened feature map) and an anomaly
//! learning head (patch-wise residual followed by top-K scoring).
//!
//! Graph-level builders (`*_node`) are what training uses; the plain-tensor
//! functions wrap them for scoring, tests and tooling.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Four top-left crop offsets `(row, col)` on the feature map, in the order
/// the patches enter the residual (w1, w2, w3, w4).
pub type PatchOrigins = [(usize, usize); 4];

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Square input side length.
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each 3x3 conv stage; stages are separated by 2x2 average pools.
    pub channels: Vec<usize>,
    /// Hidden width of the normal-head MLP.
    pub hidden: usize,
    /// Fraction of residual locations averaged by the top-K scorer.
    pub k_fraction: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            channels: vec![16, 32, 64, 64],
            hidden: 64,
            k_fraction: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be a non-empty list of positive widths".into()));
        }
        if self.in_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("in_channels and hidden must be positive".into()));
        }
        let pools = self.channels.len() - 1;
        if pools >= usize::BITS as usize || self.input_size % (1 << pools) != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^{pools}",
                self.input_size
            )));
        }
        let f = self.feature_size();
        if f < 2 || f % 2 != 0 {
            return Err(Error::Config(format!(
                "feature map side {f} must be even and at least 2"
            )));
        }
        check_k_fraction(self.k_fraction)?;
        Ok(())
    }

    /// Side length of the backbone feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size >> (self.channels.len().saturating_sub(1))
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    fn feature_len(&self) -> usize {
        self.feature_channels() * self.feature_size() * self.feature_size()
    }

    /// Parameter shapes in declaration order: backbone (kernel, bias) per
    /// stage, normal head (w1, b1, w2, b2), anomaly head projection.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut prev = self.in_channels;
        for &c in &self.channels {
            shapes.push(vec![c, prev, 3, 3]);
            shapes.push(vec![c]);
            prev = c;
        }
        shapes.push(vec![self.feature_len(), self.hidden]);
        shapes.push(vec![self.hidden]);
        shapes.push(vec![self.hidden, 1]);
        shapes.push(vec![1]);
        shapes.push(vec![1, self.feature_channels(), 1, 1]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub(crate) fn to_kv(&self) -> String {
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!(
            "input_size={}\nin_channels={}\nchannels={}\nhidden={}\nk_fraction={}\n",
            self.input_size,
            self.in_channels,
            channels.join(","),
            self.hidden,
            self.k_fraction
        )
    }

    pub(crate) fn from_kv(text: &str) -> Result<Self> {
        let mut arch = ArchConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad arch line {line:?}")))?;
            let bad = |_| Error::Format(format!("bad value for {key}: {value:?}"));
            match key {
                "input_size" => arch.input_size = value.parse().map_err(bad)?,
                "in_channels" => arch.in_channels = value.parse().map_err(bad)?,
                "hidden" => arch.hidden = value.parse().map_err(bad)?,
                "k_fraction" => {
                    arch.k_fraction = value
                        .parse()
                        .map_err(|_| Error::Format(format!("bad value for {key}: {value:?}")))?
                }
                "channels" => {
                    arch.channels = value
                        .split(',')
                        .map(|c| c.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(bad)?
                }
                other => return Err(Error::Format(format!("unknown arch key {other:?}"))),
            }
        }
        arch.validate()?;
        Ok(arch)
    }
}

fn check_k_fraction(k_fraction: f64) -> Result<()> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::Config(format!("k_fraction {k_fraction} outside (0, 1]")));
    }
    Ok(())
}

/// Number of locations the top-K scorer averages: `ceil(k_fraction * locations)`,
/// at least one.
pub fn topk_count(k_fraction: f64, locations: usize) -> Result<usize> {
    check_k_fraction(k_fraction)?;
    // The small slack keeps products like 0.1 * 30 from rounding up past an integer.
    let k = (k_fraction * locations as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, locations.max(1)))
}

/// Backbone parameters (θ) and both heads (Θ1, Θ2).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    arch: ArchConfig,
    backbone: Vec<Tensor>,
    normal_head: Vec<Tensor>,
    anomaly_head: Vec<Tensor>,
}

/// Parameter handles of a [`ModelState`] registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub backbone: Vec<NodeId>,
    pub normal_head: Vec<NodeId>,
    pub anomaly_head: Vec<NodeId>,
}

impl BoundModel {
    /// All handles in declaration order.
    pub fn ids(&self) -> Vec<NodeId> {
        self.backbone
            .iter()
            .chain(&self.normal_head)
            .chain(&self.anomaly_head)
            .copied()
            .collect()
    }
}

impl ModelState {
    /// He-style random initialization with zero biases.
    pub fn init(arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = match shape.len() {
                    4 => shape[1..].iter().product(),
                    _ => shape[0],
                };
                let gain = if shape.len() == 2 && shape[1] == 1 { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| std * rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        Self::from_params(arch, params)
    }

    /// Every parameter zero.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let params = arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Self::from_params(arch, params)
    }

    /// Rebuilds a state from parameters in declaration order.
    pub fn from_params(arch: ArchConfig, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {i}: expected shape {s:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        let mut params = params;
        let nb = 2 * arch.channels.len();
        let anomaly_head = params.split_off(nb + 4);
        let normal_head = params.split_off(nb);
        Ok(Self {
            arch,
            backbone: params,
            normal_head,
            anomaly_head,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.backbone.iter().chain(&self.normal_head).chain(&self.anomaly_head)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.backbone
            .iter_mut()
            .chain(&mut self.normal_head)
            .chain(&mut self.anomaly_head)
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::numel).sum()
    }

    pub fn backbone_params(&self) -> &[Tensor] {
        &self.backbone
    }

    pub fn normal_head_params(&self) -> &[Tensor] {
        &self.normal_head
    }

    pub fn normal_head_params_mut(&mut self) -> &mut [Tensor] {
        &mut self.normal_head
    }

    pub fn anomaly_head_params(&self) -> &[Tensor] {
        &self.anomaly_head
    }

    pub fn anomaly_head_params_mut(&mut self) -> &mut [Tensor] {
        &mut self.anomaly_head
    }

    /// Registers every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut leaf = |ts: &[Tensor]| ts.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        BoundModel {
            backbone: leaf(&self.backbone),
            normal_head: leaf(&self.normal_head),
            anomaly_head: leaf(&self.anomaly_head),
        }
    }
}

/// Backbone on a batch `[N,C,H,W]`: per stage a padded 3x3 conv, bias and
/// relu, with a 2x2 average pool between stages.
pub fn backbone_node(g: &mut Graph, arch: &ArchConfig, bound: &BoundModel, x: NodeId) -> Result<NodeId> {
    let s = arch.input_size;
    match g.shape(x) {
        &[_, c, h, w] if c == arch.in_channels && h == s && w == s => {}
        other => {
            return Err(Error::Dimension(format!(
                "backbone expects [N,{},{s},{s}], got {other:?}",
                arch.in_channels
            )))
        }
    }
    let mut h = x;
    for (stage, pair) in bound.backbone.chunks(2).enumerate() {
        if stage > 0 {
            h = g.avg_pool2d(h, 2)?;
        }
        h = g.conv2d_bias(h, pair[0], pair[1], 1, 1)?;
        h = g.relu(h)?;
    }
    Ok(h)
}

/// Normal learning head: flatten, linear, relu, linear. Output `[N]`.
pub fn normal_head_node(g: &mut Graph, bound: &BoundModel, features: NodeId) -> Result<NodeId> {
    let n = g.shape(features)[0];
    let flat = g.flatten(features)?;
    let p = &bound.normal_head;
    let h = g.matmul(flat, p[0])?;
    let h = g.bias_add(h, p[1])?;
    let h = g.relu(h)?;
    let out = g.matmul(h, p[2])?;
    let out = g.bias_add(out, p[3])?;
    g.reshape(out, &[n])
}

/// Crops four half-size patches per sample and combines them as
/// `w4 - (w3 - (w2 - w1))`.
pub fn patch_residual_node(g: &mut Graph, features: NodeId, origins: &[PatchOrigins]) -> Result<NodeId> {
    let (h, w) = match g.shape(features) {
        &[_, _, h, w] => (h, w),
        other => return Err(Error::Dimension(format!("features must be [N,C,H,W], got {other:?}"))),
    };
    check_even(h, w)?;
    let size = (h / 2, w / 2);
    let mut patches = Vec::with_capacity(4);
    for slot in 0..4 {
        let per_sample: Vec<(usize, usize)> = origins.iter().map(|o| o[slot]).collect();
        patches.push(g.crop(features, &per_sample, size)?);
    }
    let inner = g.sub(patches[1], patches[0])?;
    let mid = g.sub(patches[2], inner)?;
    g.sub(patches[3], mid)
}

/// 1x1 projection of the residual to one score map, then the per-sample mean
/// of the top `ceil(k_fraction * L)` locations. Output `[N]`.
pub fn topk_score_node(g: &mut Graph, bound: &BoundModel, residual: NodeId, k_fraction: f64) -> Result<NodeId> {
    let map = g.conv2d(residual, bound.anomaly_head[0], 1, 0)?;
    let shape = g.shape(map);
    let k = topk_count(k_fraction, shape[2] * shape[3])?;
    g.topk_mean(map, k)
}

/// Both head outputs for a batch, given per-sample patch origins.
pub fn two_heads_node(
    g: &mut Graph,
    arch: &ArchConfig,
    bound: &BoundModel,
    x: NodeId,
    origins: &[PatchOrigins],
) -> Result<(NodeId, NodeId)> {
    let features = backbone_node(g, arch, bound, x)?;
    let phi1 = normal_head_node(g, bound, features)?;
    let residual = patch_residual_node(g, features, origins)?;
    let phi2 = topk_score_node(g, bound, residual, arch.k_fraction)?;
    Ok((phi1, phi2))
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Contract(format!(
            "feature map {h}x{w} must have even, non-zero sides"
        )));
    }
    Ok(())
}

/// Training-time origins: four independent draws, each uniform over the
/// `(H/2 + 1) x (W/2 + 1)` grid of in-bounds offsets.
pub fn draw_patch_origins(h: usize, w: usize, rng: &mut impl Rng) -> Result<PatchOrigins> {
    check_even(h, w)?;
    let mut origins = [(0, 0); 4];
    for o in origins.iter_mut() {
        *o = (rng.gen_range(0..=h / 2), rng.gen_range(0..=w / 2));
    }
    Ok(origins)
}

/// Inference-time origins: the four quadrants in raster order.
pub fn quadrant_origins(h: usize, w: usize) -> PatchOrigins {
    [(0, 0), (0, w / 2), (h / 2, 0), (h / 2, w / 2)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub w4: Tensor,
    pub origins: PatchOrigins,
}

impl PatchSet {
    /// Crops the four patches of a single feature map `[1,C,H,W]` at `origins`.
    pub fn from_origins(features: &Tensor, origins: PatchOrigins) -> Result<Self> {
        let (h, w) = match features.shape() {
            &[1, _, h, w] => (h, w),
            other => return Err(Error::Dimension(format!("features must be [1,C,H,W], got {other:?}"))),
        };
        check_even(h, w)?;
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let mut crops = Vec::with_capacity(4);
        for o in origins {
            let id = g.crop(f, &[o], (h / 2, w / 2))?;
            crops.push(g.value(id).clone());
        }
        let mut it = crops.into_iter();
        let mut next = || it.next().expect("four crops");
        Ok(Self {
            w1: next(),
            w2: next(),
            w3: next(),
            w4: next(),
            origins,
        })
    }
}

/// Random split of a feature map into four half-size patches.
pub fn split_patches(features: &Tensor, rng: &mut impl Rng) -> Result<PatchSet> {
    let (h, w) = match features.shape() {
        &[1, _, h, w] => (h, w),
        other => return Err(Error::Dimension(format!("features must be [1,C,H,W], got {other:?}"))),
    };
    let origins = draw_patch_origins(h, w, rng)?;
    PatchSet::from_origins(features, origins)
}

/// `R = w4 - (w3 - (w2 - w1))`.
pub fn patch_residual(patches: &PatchSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let [w1, w2, w3, w4] = [&patches.w1, &patches.w2, &patches.w3, &patches.w4].map(|t| g.constant(t.clone()));
    let inner = g.sub(w2, w1)?;
    let mid = g.sub(w3, inner)?;
    let r = g.sub(w4, mid)?;
    Ok(g.value(r).clone())
}

/// Mean of the top `ceil(k_fraction * len)` values (ties by ascending index).
pub fn topk_mean(scores: &[f64], k_fraction: f64) -> Result<f64> {
    let k = topk_count(k_fraction, scores.len())?;
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(vec![1, scores.len()], scores.to_vec())?);
    let out = g.topk_mean(s, k)?;
    g.value(out).item()
}

/// Runs the graph builder `f` on a parameter-frozen copy of `state`.
fn with_frozen<T>(
    state: &ModelState,
    input: &Tensor,
    f: impl FnOnce(&mut Graph, &BoundModel, NodeId) -> Result<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let x = g.constant(input.clone());
    f(&mut g, &bound, x)
}

pub fn backbone_forward(image: &Tensor, state: &ModelState) -> Result<Tensor> {
    with_frozen(state, image, |g, b, x| {
        let f = backbone_node(g, &state.arch, b, x)?;
        Ok(g.value(f).clone())
    })
}

/// φ(x; Θ1) for a feature map `[1,C,H,W]` (or already flattened `[1,D]`).
pub fn normal_head(features: &Tensor, state: &ModelState) -> Result<f64> {
    let expected = state.arch.feature_len();
    if features.numel() != expected || features.shape().first() != Some(&1) {
        return Err(Error::Dimension(format!(
            "normal head expects 1 x {expected} features, got {:?}",
            features.shape()
        )));
    }
    with_frozen(state, features, |g, b, x| {
        let out = normal_head_node(g, b, x)?;
        g.value(out).item()
    })
}

/// φ(x; Θ2) contribution of a residual map `[1,C,h,w]`.
pub fn topk_score(residual: &Tensor, state: &ModelState, k_fraction: f64) -> Result<f64> {
    check_k_fraction(k_fraction)?;
    match residual.shape() {
        &[1, c, _, _] if c == state.arch.feature_channels() => {}
        other => return Err(Error::Dimension(format!("residual must be [1,C_f,h,w], got {other:?}"))),
    }
    with_frozen(state, residual, |g, b, x| {
        let out = topk_score_node(g, b, x, k_fraction)?;
        g.value(out).item()
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadScores {
    pub phi1: f64,
    pub phi2: f64,
}

impl HeadScores {
    /// Inference anomaly score φ2 − φ1.
    pub fn anomaly_score(&self) -> f64 {
        self.phi2 - self.phi1
    }
}

fn add_batch_axis(image: &Tensor) -> Result<Tensor> {
    match image.ndim() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            image.clone().reshape(&shape)
        }
        4 => Ok(image.clone()),
        _ => Err(Error::Dimension(format!("image must be [C,H,W] or [1,C,H,W], got {:?}", image.shape()))),
    }
}

/// Training-mode forward with randomly drawn patch origins.
pub fn forward_two_heads(image: &Tensor, state: &ModelState, rng: &mut impl Rng) -> Result<HeadScores> {
    let fs = state.arch.feature_size();
    let origins = draw_patch_origins(fs, fs, rng)?;
    forward_with_origins(image, state, origins)
}

pub fn forward_with_origins(image: &Tensor, state: &ModelState, origins: PatchOrigins) -> Result<HeadScores> {
    let input = add_batch_axis(image)?;
    with_frozen(state, &input, |g, b, x| {
        let (p1, p2) = two_heads_node(g, &state.arch, b, x, &[origins])?;
        Ok(HeadScores {
            phi1: g.value(p1).item()?,
            phi2: g.value(p2).item()?,
        })
    })
}

/// φ(x;Θ2) − φ(x;Θ1) with patches fixed to the quadrant tiling.
pub fn inference_score(image: &Tensor, state: &ModelState) -> Result<f64> {
    let fs = state.arch.feature_size();
    Ok(forward_with_origins(image, state, quadrant_origins(fs, fs))?.anomaly_score())
}

/// Inference-mode head scores for many `[C,H,W]` images, batched.
pub fn score_images(images: &[&Tensor], state: &ModelState) -> Result<Vec<HeadScores>> {
    const CHUNK: usize = 32;
    let fs = state.arch.feature_size();
    let origins = quadrant_origins(fs, fs);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let batch = Tensor::stack(chunk)?;
        let scores = with_frozen(state, &batch, |g, b, x| {
            let (p1, p2) = two_heads_node(g, &state.arch, b, x, &vec![origins; chunk.len()])?;
            Ok(g.value(p1)
                .data()
                .iter()
                .zip(g.value(p2).data())
                .map(|(&phi1, &phi2)| HeadScores { phi1, phi2 })
                .collect::<Vec<_>>())
        })?;
        out.extend(scores);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            input_size: 16,
            in_channels: 3,
            channels: vec![4, 6, 8],
            hidden: 5,
            k_fraction: 0.1,
        }
    }

    #[test]
    fn default_backbone_shape() {
        let arch = ArchConfig::default();
        let state = ModelState::init(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::full(&[1, 3, 64, 64], 0.5);
        let f = backbone_forward(&x, &state).unwrap();
        assert_eq!(f.shape(), &[1, 64, 8, 8]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let state = ModelState::init(tiny_arch(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let f = backbone_forward(&Tensor::zeros(&[1, 3, 16, 16]), &state).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_is_dimension_error() {
        let state = ModelState::zeros(tiny_arch()).unwrap();
        let err = backbone_forward(&Tensor::zeros(&[1, 3, 15, 16]), &state).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn param_count_is_function_of_arch() {
        let a = tiny_arch();
        let s1 = ModelState::init(a.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let s2 = ModelState::zeros(a.clone()).unwrap();
        assert_eq!(s1.param_count(), a.param_count());
        assert_eq!(s2.param_count(), a.param_count());
        // 3x3 convs 3->4->6->8, head 8*4*4 -> 5 -> 1, projection 8.
        let expected = (4 * 27 + 4) + (6 * 36 + 6) + (8 * 54 + 8) + (128 * 5 + 5) + (5 + 1) + 8;
        assert_eq!(a.param_count(), expected);
    }

    #[test]
    fn normal_head_zero_weights() {
        let state = ModelState::zeros(tiny_arch()).unwrap();
        let f = Tensor::full(&[1, 8, 4, 4], 0.3);
        assert_eq!(normal_head(&f, &state).unwrap(), 0.0);
    }

    #[test]
    fn normal_head_hand_set() {
        // Features flattened to width 3, hidden width 2.
        let arch = ArchConfig {
            input_size: 2,
            in_channels: 1,
            channels: vec![3],
            hidden: 2,
            k_fraction: 1.0,
        };
        // Feature map 3x2x2 -> width 12; only the first entry is set.
        let mut state = ModelState::zeros(arch).unwrap();
        let head = state.normal_head_params_mut();
        head[0].data_mut()[0] = 1.0; // x0 -> h0
        head[0].data_mut()[1] = -1.0; // x0 -> h1
        head[1].data_mut()[0] = 0.5;
        head[2].data_mut()[0] = 2.0;
        head[2].data_mut()[1] = 3.0;
        head[3].data_mut()[0] = 0.25;
        let mut feats = Tensor::zeros(&[1, 3, 2, 2]);
        feats.data_mut()[0] = 3.0;
        // h = relu(3 + 0.5, -3) = (3.5, 0); out = 2 * 3.5 + 0.25
        assert_eq!(normal_head(&feats, &state).unwrap(), 7.25);
        let err = normal_head(&Tensor::zeros(&[1, 5]), &state).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn degenerate_two_by_two_split() {
        let feats = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let p = PatchSet::from_origins(&feats, [(0, 0); 4]).unwrap();
        assert_eq!(p.w1, p.w2);
        assert_eq!(p.w3, p.w4);
        assert_eq!(p.w1, p.w4);
        assert_eq!(p.w1.data(), &[0.0, 4.0]);
        assert!(patch_residual(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_feature_map_rejected() {
        let feats = Tensor::zeros(&[1, 2, 3, 4]);
        let err = split_patches(&feats, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn residual_of_constant_patches() {
        let c = |v| Tensor::full(&[1, 3, 2, 2], v);
        let p = PatchSet {
            w1: c(1.0),
            w2: c(2.0),
            w3: c(3.0),
            w4: c(4.0),
            origins: [(0, 0); 4],
        };
        assert!(patch_residual(&p).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn topk_examples() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(topk_mean(&scores, 0.1).unwrap(), 10.0);
        assert_eq!(topk_mean(&[2.5; 7], 0.3).unwrap(), 2.5);
        assert!(matches!(topk_mean(&scores, 0.0), Err(Error::Config(_))));
        assert!(matches!(topk_mean(&scores, 1.5), Err(Error::Config(_))));
        assert_eq!(topk_count(0.1, 30).unwrap(), 3);
        assert_eq!(topk_count(0.1, 16).unwrap(), 2);
    }

    #[test]
    fn zero_heads_score_zero() {
        let mut state = ModelState::init(tiny_arch(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for p in state.normal_head_params_mut() {
            p.data_mut().fill(0.0);
        }
        for p in state.anomaly_head_params_mut() {
            p.data_mut().fill(0.0);
        }
        let x = Tensor::full(&[3, 16, 16], 0.7);
        let s = forward_two_heads(&x, &state, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(s, HeadScores { phi1: 0.0, phi2: 0.0 });
    }

    #[test]
    fn anomaly_score_arithmetic() {
        assert_eq!(HeadScores { phi1: 1.5, phi2: 4.0 }.anomaly_score(), 2.5);
        assert_eq!(HeadScores { phi1: 0.3, phi2: 0.3 }.anomaly_score(), 0.0);
    }

    #[test]
    fn batched_scores_match_single() {
        let state = ModelState::init(tiny_arch(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let imgs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[3, 16, 16], |_| rng.gen::<f64>()))
            .collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let batched = score_images(&refs, &state).unwrap();
        for (img, s) in imgs.iter().zip(&batched) {
            assert_eq!(inference_score(img, &state).unwrap(), s.anomaly_score());
        }
    }
}
