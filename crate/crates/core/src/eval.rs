//! AUC-ROC and the general / hard / anomaly-free protocols.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::synth::write_csv;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{score_images, HeadScores};
use crate::saliency::SaliencyConfig;
use crate::tensor::Tensor;
use crate::train::{train, DeviationConfig, TrainConfig, TrainSet};

/// Probability that a random anomaly outscores a random normal, ties count one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {s}")));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.iter().filter(|&&y| y == 0).count();
    if positives + negatives != labels.len() {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("AUC needs both normal and anomalous samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    General,
    Hard,
    AnomalyFree,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::General => "general",
            Setting::Hard => "hard",
            Setting::AnomalyFree => "anomaly_free",
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Setting::General),
            "hard" => Ok(Setting::Hard),
            "anomaly_free" => Ok(Setting::AnomalyFree),
            other => Err(Error::Config(format!(
                "unknown setting {other:?} (expected general, hard, anomaly_free)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSpec {
    pub setting: Setting,
    /// Seen anomalies available for training.
    pub budget: usize,
    /// Hard setting only; defaults to the dataset's first anomaly type.
    pub seen_type: Option<String>,
    /// One master seed per trial.
    pub seeds: Vec<u64>,
    /// Fraction of normals used for training.
    pub train_fraction: f64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            setting: Setting::Hard,
            budget: 10,
            seen_type: None,
            seeds: vec![0, 1, 2],
            train_fraction: 0.7,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.setting == Setting::AnomalyFree && self.budget != 0 {
            return Err(Error::Config(format!(
                "anomaly_free setting requires budget 0, got {}",
                self.budget
            )));
        }
        if self.setting != Setting::AnomalyFree && self.budget == 0 {
            return Err(Error::Config(format!(
                "{} setting needs a positive budget",
                self.setting.name()
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one trial seed is required".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Train and test partitions of one trial.
#[derive(Clone, Debug)]
pub struct Split<'a> {
    pub train: TrainSet<'a>,
    pub test: Vec<&'a Sample>,
}

impl Split<'_> {
    pub fn train_ids(&self) -> Vec<String> {
        self.train
            .normals
            .iter()
            .chain(&self.train.anomalies)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.test.iter().map(|s| s.id.clone()).collect()
    }

    fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<String> = self.train_ids().into_iter().collect();
        match self.test.iter().find(|s| train.contains(&s.id)) {
            Some(s) => Err(Error::Contract(format!("{} appears in both train and test", s.id))),
            None => Ok(()),
        }
    }
}

/// Splits normals by `train_fraction` and assigns anomalies per the setting.
pub fn build_split<'a>(ds: &'a Dataset, spec: &ProtocolSpec, rng: &mut impl Rng) -> Result<Split<'a>> {
    spec.validate()?;
    let mut normals: Vec<&Sample> = ds.normals.iter().collect();
    normals.shuffle(rng);
    let n_train = ((normals.len() as f64 * spec.train_fraction).round() as usize).clamp(1, normals.len());
    if n_train == normals.len() {
        return Err(Error::Data(format!("{} normals are too few to split", normals.len())));
    }
    let test_normals = normals.split_off(n_train);
    let types = ds.anomaly_types();
    let (train_anomalies, test_anomalies): (Vec<&Sample>, Vec<&Sample>) = match spec.setting {
        Setting::AnomalyFree => (Vec::new(), ds.anomalies.iter().collect()),
        Setting::Hard => {
            let seen = match &spec.seen_type {
                Some(t) => t.clone(),
                None => types
                    .first()
                    .cloned()
                    .ok_or_else(|| Error::Data("hard setting needs anomalies".into()))?,
            };
            let mut pool: Vec<&Sample> = ds.anomalies.iter().filter(|s| s.type_tag == seen).collect();
            if pool.len() < spec.budget {
                return Err(Error::Data(format!(
                    "seen type {seen:?} has {} anomalies, budget is {}",
                    pool.len(),
                    spec.budget
                )));
            }
            pool.shuffle(rng);
            pool.truncate(spec.budget);
            let test: Vec<&Sample> = ds.anomalies.iter().filter(|s| s.type_tag != seen).collect();
            (pool, test)
        }
        Setting::General => {
            if ds.anomalies.len() < spec.budget {
                return Err(Error::Data(format!(
                    "{} anomalies available, budget is {}",
                    ds.anomalies.len(),
                    spec.budget
                )));
            }
            // Round-robin over types in shuffled order so the budget spreads evenly.
            let mut by_type: Vec<Vec<&Sample>> = types
                .iter()
                .map(|t| ds.anomalies.iter().filter(|s| &s.type_tag == t).collect())
                .collect();
            for group in &mut by_type {
                group.shuffle(rng);
            }
            by_type.shuffle(rng);
            let mut chosen = Vec::new();
            let k = by_type.len();
            let mut t = 0;
            while chosen.len() < spec.budget {
                if let Some(s) = by_type[t % k].pop() {
                    chosen.push(s);
                }
                t += 1;
            }
            let ids: HashSet<&str> = chosen.iter().map(|s| s.id.as_str()).collect();
            let test = ds.anomalies.iter().filter(|s| !ids.contains(s.id.as_str())).collect();
            (chosen, test)
        }
    };
    if test_anomalies.is_empty() {
        return Err(Error::Data("test set has no anomalies".into()));
    }
    let split = Split {
        train: TrainSet {
            normals,
            anomalies: train_anomalies,
        },
        test: test_normals.into_iter().chain(test_anomalies).collect(),
    };
    split.check_disjoint()?;
    Ok(split)
}

/// Produces head scores for the test set of one trial.
pub trait TrialScorer {
    fn score(&mut self, split: &Split, seed: u64) -> Result<Vec<HeadScores>>;
}

/// Trains a fresh model on the split and scores with the deterministic inference rule.
pub struct ModelScorer {
    pub train: TrainConfig,
    pub deviation: DeviationConfig,
    pub saliency: SaliencyConfig,
}

impl TrialScorer for ModelScorer {
    fn score(&mut self, split: &Split, seed: u64) -> Result<Vec<HeadScores>> {
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let outcome = train(&split.train, &cfg, &self.deviation, &self.saliency, None)?;
        let images: Vec<&Tensor> = split.test.iter().map(|s| &s.image).collect();
        score_images(&images, &outcome.model)
    }
}

/// One line of a score dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRow {
    pub id: String,
    pub label: u8,
    pub type_tag: String,
    pub phi1: f64,
    pub phi2: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialReport {
    pub seed: u64,
    pub auc: f64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub score_dump: Option<String>,
    #[serde(skip)]
    pub scores: Vec<ScoreRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub budget: usize,
    pub seen_type: Option<String>,
    pub trials: Vec<TrialReport>,
    pub mean_auc: f64,
    /// Population standard deviation over trials.
    pub std_auc: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("report json: {e}")))
    }
}

/// Runs every trial: split, score the test set, compute AUC. When `out_dir`
/// is given, each trial's scores go to `scores_seed<seed>.csv` there.
pub fn run_protocol(
    ds: &Dataset,
    spec: &ProtocolSpec,
    scorer: &mut dyn TrialScorer,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    spec.validate()?;
    let mut trials = Vec::new();
    for &seed in &spec.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = build_split(ds, spec, &mut rng)?;
        let heads = scorer.score(&split, seed)?;
        if heads.len() != split.test.len() {
            return Err(Error::Contract(format!(
                "scorer returned {} scores for {} test samples",
                heads.len(),
                split.test.len()
            )));
        }
        let rows: Vec<ScoreRow> = split
            .test
            .iter()
            .zip(&heads)
            .map(|(s, h)| ScoreRow {
                id: s.id.clone(),
                label: s.label,
                type_tag: s.type_tag.clone(),
                phi1: h.phi1,
                phi2: h.phi2,
                score: h.anomaly_score(),
            })
            .collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        let auc = auc_roc(&scores, &labels)?;
        log::info!("{} seed {seed}: AUC {auc:.4}", spec.setting.name());
        let score_dump = match out_dir {
            Some(dir) => {
                let name = format!("scores_seed{seed}.csv");
                write_csv(&dir.join(&name), &rows)?;
                Some(name)
            }
            None => None,
        };
        trials.push(TrialReport {
            seed,
            auc,
            train_ids: split.train_ids(),
            test_ids: split.test_ids(),
            score_dump,
            scores: rows,
        });
    }
    let n = trials.len() as f64;
    let mean_auc = trials.iter().map(|t| t.auc).sum::<f64>() / n;
    let std_auc = (trials.iter().map(|t| (t.auc - mean_auc).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport {
        setting: spec.setting,
        budget: spec.budget,
        seen_type: spec.seen_type.clone(),
        trials,
        mean_auc,
        std_auc,
    })
}
