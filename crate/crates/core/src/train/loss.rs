//! Gaussian-prior deviation scoring and the two-head deviation loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// When the reference score set is redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorRedraw {
    Iteration,
    Epoch,
}

/// Labels each head is trained against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadTargets {
    /// Both heads see the sample label `y`.
    Shared,
    /// The normal head sees `1 - y`, so it scores normality; the anomaly head sees `y`.
    InvertedNormal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationConfig {
    /// Z-score margin `a` anomalies must clear.
    pub margin: f64,
    /// Size `l` of the Gaussian reference score set.
    pub prior_count: usize,
    pub redraw: PriorRedraw,
    pub head_targets: HeadTargets,
}

impl Default for DeviationConfig {
    fn default() -> Self {
        Self {
            margin: 5.0,
            prior_count: 5000,
            redraw: PriorRedraw::Iteration,
            head_targets: HeadTargets::InvertedNormal,
        }
    }
}

impl DeviationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.prior_count < 2 {
            return Err(Error::Config(format!(
                "prior_count must be at least 2, got {}",
                self.prior_count
            )));
        }
        Ok(())
    }
}

/// Mean and standard deviation of a reference score set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorStats {
    pub mean: f64,
    pub std: f64,
}

impl PriorStats {
    /// Sample mean and population standard deviation of `values`.
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Config("prior needs at least two samples".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::Config("prior samples have zero spread".into()));
        }
        Ok(Self { mean, std })
    }
}

/// Draws `count` standard-normal reference scores and summarizes them.
pub fn prior_stats(rng: &mut impl Rng, count: usize) -> Result<PriorStats> {
    if count < 2 {
        return Err(Error::Config(format!("prior_count must be at least 2, got {count}")));
    }
    let draws: Vec<f64> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
    PriorStats::from_samples(&draws)
}

/// Z-score of a head output against the prior.
pub fn deviation(phi: f64, mean: f64, std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::Config(format!("prior std must be positive, got {std}")));
    }
    Ok((phi - mean) / std)
}

/// `Σ_h (1 - y)|dev_h| + y max(0, a - dev_h)` over both heads, same label.
pub fn deviation_loss(dev1: f64, dev2: f64, y: u8, margin: f64) -> f64 {
    [dev1, dev2]
        .iter()
        .map(|&d| head_loss(d, y, margin))
        .sum()
}

/// One head's term of the deviation loss.
pub fn head_loss(dev: f64, y: u8, margin: f64) -> f64 {
    if y == 0 {
        dev.abs()
    } else {
        (margin - dev).max(0.0)
    }
}

/// Everything needed to evaluate the loss on a batch.
#[derive(Clone, Copy, Debug)]
pub struct LossContext {
    pub prior: PriorStats,
    pub margin: f64,
    pub head_targets: HeadTargets,
}

/// Per-sample deviation loss `[N]` for head outputs `phi1`, `phi2` (each `[N]`).
pub fn deviation_loss_node(
    g: &mut Graph,
    phi1: NodeId,
    phi2: NodeId,
    labels: &[u8],
    ctx: &LossContext,
) -> Result<NodeId> {
    let n = labels.len();
    if g.shape(phi1) != [n] || g.shape(phi2) != [n] {
        return Err(Error::Dimension(format!(
            "loss expects [{n}] head outputs, got {:?} and {:?}",
            g.shape(phi1),
            g.shape(phi2)
        )));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    let head1_labels: Vec<u8> = match ctx.head_targets {
        HeadTargets::Shared => labels.to_vec(),
        HeadTargets::InvertedNormal => labels.iter().map(|y| 1 - y).collect(),
    };
    let t1 = head_term(g, phi1, &head1_labels, ctx)?;
    let t2 = head_term(g, phi2, labels, ctx)?;
    g.add(t1, t2)
}

fn head_term(g: &mut Graph, phi: NodeId, labels: &[u8], ctx: &LossContext) -> Result<NodeId> {
    let PriorStats { mean, std } = ctx.prior;
    if !(std > 0.0) {
        return Err(Error::Config(format!("prior std must be positive, got {std}")));
    }
    let centered = g.add_scalar(phi, -mean)?;
    let dev = g.scale(centered, 1.0 / std)?;
    let abs = g.abs(dev)?;
    let neg = g.scale(dev, -1.0)?;
    let gap = g.add_scalar(neg, ctx.margin)?;
    let hinge = g.relu(gap)?;
    let n = labels.len();
    let normal_w = g.constant(Tensor::from_fn(&[n], |i| f64::from(1 - labels[i])));
    let anomaly_w = g.constant(Tensor::from_fn(&[n], |i| f64::from(labels[i])));
    let a = g.mul(abs, normal_w)?;
    let b = g.mul(hinge, anomaly_w)?;
    g.add(a, b)
}
