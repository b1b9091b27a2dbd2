//! Flat `key = value` run configuration covering every tunable default.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{ProtocolSpec, Setting};
use crate::saliency::SaliencyConfig;
use crate::train::{DeviationConfig, HeadTargets, PriorRedraw, TrainConfig};

/// Every key with a one-line description, in the order they are printed.
pub const KEYS: &[(&str, &str)] = &[
    ("grid_size", "saliency pooling grid side"),
    ("threshold", "saliency mask threshold; values >= it are salient"),
    ("spline_order", "B-spline degree for saliency smoothing"),
    ("margin", "deviation-loss Z-score margin for anomalies"),
    ("prior_count", "size of the Gaussian reference score set"),
    ("prior_redraw", "when the reference set is redrawn: iteration | epoch"),
    ("head_targets", "labels per head: inverted_normal | shared"),
    ("epochs", "training epochs"),
    ("iterations_per_epoch", "optimizer steps per epoch"),
    ("batch_size", "samples per step (even)"),
    ("learning_rate", "Adam step size"),
    ("weight_decay", "L2 penalty added to gradients"),
    ("augmentation", "pseudo anomalies: saliencycut | random_cut_paste | none"),
    ("pool_size", "pseudo samples per epoch; 0 = one per training normal"),
    ("pool_cap", "upper bound on pseudo samples per epoch"),
    ("input_size", "image side the network expects"),
    ("in_channels", "image channels"),
    ("channels", "backbone stage widths, comma separated"),
    ("hidden", "normal-head hidden width"),
    ("k_fraction", "fraction of locations averaged by top-K scoring"),
    ("setting", "protocol: general | hard | anomaly_free"),
    ("budget", "seen anomalies available for training"),
    ("seen_type", "seen anomaly type in the hard setting; empty = first type"),
    ("trials", "independent trials; trial i uses seed + i"),
    ("train_fraction", "share of normals used for training"),
    ("seed", "master seed"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub saliency: SaliencyConfig,
    pub deviation: DeviationConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolSpec,
    pub trials: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            saliency: SaliencyConfig::default(),
            deviation: DeviationConfig::default(),
            train: TrainConfig::default(),
            protocol: ProtocolSpec::default(),
            trials: 3,
            seed: 0,
        };
        cfg.sync_seeds();
        cfg
    }
}

fn parse<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn lift<T: std::str::FromStr<Err = Error>>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|e: Error| e.to_string())
}

impl RunConfig {
    /// Current value of `key`, formatted as it would be written.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.saliency;
        let d = &self.deviation;
        let t = &self.train;
        let p = &self.protocol;
        Some(match key {
            "grid_size" => s.grid_size.to_string(),
            "threshold" => s.threshold.to_string(),
            "spline_order" => s.spline_order.to_string(),
            "margin" => d.margin.to_string(),
            "prior_count" => d.prior_count.to_string(),
            "prior_redraw" => match d.redraw {
                PriorRedraw::Iteration => "iteration".into(),
                PriorRedraw::Epoch => "epoch".into(),
            },
            "head_targets" => match d.head_targets {
                HeadTargets::InvertedNormal => "inverted_normal".into(),
                HeadTargets::Shared => "shared".into(),
            },
            "epochs" => t.epochs.to_string(),
            "iterations_per_epoch" => t.iterations_per_epoch.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "augmentation" => t.augmentation.name().into(),
            "pool_size" => t.pool_size.to_string(),
            "pool_cap" => t.pool_cap.to_string(),
            "input_size" => t.arch.input_size.to_string(),
            "in_channels" => t.arch.in_channels.to_string(),
            "channels" => t
                .arch
                .channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "hidden" => t.arch.hidden.to_string(),
            "k_fraction" => t.arch.k_fraction.to_string(),
            "setting" => p.setting.name().into(),
            "budget" => p.budget.to_string(),
            "seen_type" => p.seen_type.clone().unwrap_or_default(),
            "trials" => self.trials.to_string(),
            "train_fraction" => p.train_fraction.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Sets one key; the error text names what was wrong with the value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        let s = &mut self.saliency;
        let d = &mut self.deviation;
        let t = &mut self.train;
        let p = &mut self.protocol;
        match key {
            "grid_size" => s.grid_size = parse(value)?,
            "threshold" => s.threshold = parse(value)?,
            "spline_order" => s.spline_order = parse(value)?,
            "margin" => d.margin = parse(value)?,
            "prior_count" => d.prior_count = parse(value)?,
            "prior_redraw" => {
                d.redraw = match value {
                    "iteration" => PriorRedraw::Iteration,
                    "epoch" => PriorRedraw::Epoch,
                    _ => return Err(format!("expected iteration or epoch, got {value:?}")),
                }
            }
            "head_targets" => {
                d.head_targets = match value {
                    "inverted_normal" => HeadTargets::InvertedNormal,
                    "shared" => HeadTargets::Shared,
                    _ => return Err(format!("expected inverted_normal or shared, got {value:?}")),
                }
            }
            "epochs" => t.epochs = parse(value)?,
            "iterations_per_epoch" => t.iterations_per_epoch = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "learning_rate" => t.learning_rate = parse(value)?,
            "weight_decay" => t.weight_decay = parse(value)?,
            "augmentation" => t.augmentation = lift(value)?,
            "pool_size" => t.pool_size = parse(value)?,
            "pool_cap" => t.pool_cap = parse(value)?,
            "input_size" => t.arch.input_size = parse(value)?,
            "in_channels" => t.arch.in_channels = parse(value)?,
            "channels" => {
                t.arch.channels = value
                    .split(',')
                    .map(|c| parse(c.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "hidden" => t.arch.hidden = parse(value)?,
            "k_fraction" => t.arch.k_fraction = parse(value)?,
            "setting" => p.setting = lift::<Setting>(value)?,
            "budget" => p.budget = parse(value)?,
            "seen_type" => p.seen_type = (!value.is_empty()).then(|| value.to_string()),
            "trials" => self.trials = parse(value)?,
            "train_fraction" => p.train_fraction = parse(value)?,
            "seed" => self.seed = parse(value)?,
            _ => return Err("unknown key".into()),
        }
        self.sync_seeds();
        Ok(())
    }

    fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        self.protocol.seeds = (0..self.trials as u64).map(|i| self.seed.wrapping_add(i)).collect();
    }

    /// Applies `key = value` lines (with `#` comments) and then `overrides`,
    /// collecting every bad key before failing.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(text) = file_text {
            for (n, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
                    None => problems.push(format!("line {}: expected key = value, got {raw:?}", n + 1)),
                }
            }
        }
        pairs.extend(overrides.iter().cloned());
        for (key, value) in &pairs {
            if let Err(msg) = cfg.set(key, value) {
                problems.push(format!("{key}: {msg}"));
            }
        }
        for (key, _) in KEYS {
            if let Some(msg) = cfg.check_key(key) {
                problems.push(format!("{key}: {msg}"));
            }
        }
        if problems.is_empty() {
            for check in [
                cfg.saliency.validate(),
                cfg.deviation.validate(),
                cfg.train.validate(),
                cfg.protocol.validate(),
            ] {
                if let Err(e) = check {
                    problems.push(e.to_string());
                }
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Range check for a single key, independent of the others.
    fn check_key(&self, key: &str) -> Option<String> {
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        let ok = match key {
            "grid_size" => self.saliency.grid_size >= 2,
            "threshold" => unit_open(self.saliency.threshold),
            "margin" => self.deviation.margin > 0.0 && self.deviation.margin.is_finite(),
            "prior_count" => self.deviation.prior_count >= 2,
            "batch_size" => self.train.batch_size > 0 && self.train.batch_size % 2 == 0,
            "learning_rate" => self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite(),
            "weight_decay" => self.train.weight_decay >= 0.0 && self.train.weight_decay.is_finite(),
            "input_size" | "in_channels" | "hidden" => self.get(key).is_some_and(|v| v != "0"),
            "channels" => !self.train.arch.channels.is_empty() && !self.train.arch.channels.contains(&0),
            "k_fraction" => self.train.arch.k_fraction > 0.0 && self.train.arch.k_fraction <= 1.0,
            "trials" => self.trials >= 1,
            "train_fraction" => unit_open(self.protocol.train_fraction),
            _ => true,
        };
        (!ok).then(|| format!("value {} is out of range", self.get(key).unwrap_or_default()))
    }

    pub fn resolve_file(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Help text listing every key, its default and meaning.
    pub fn help_table() -> String {
        let defaults = Self::default();
        let mut out = String::from("Config keys (set with --set key=value or a --config file):\n");
        for (k, desc) in KEYS {
            let v = defaults.get(k).unwrap_or_default();
            let v = if v.is_empty() { "\"\"".to_string() } else { v };
            out.push_str(&format!("  {k:<22} default {v:<16} {desc}\n"));
        }
        out
    }
}
