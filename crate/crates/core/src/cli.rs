//! Command-line front end: synth, augment, train, score, eval.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::augment::{generate_cut_paste_pool, generate_pseudo_pool_items, MaskSource, PoolConfig, PoolItem};
use crate::config::RunConfig;
use crate::data::image_io::{quantize, write_image, write_tensor_image, ImageFormat, Raster};
use crate::data::synth::{write_corpus, write_csv, CorpusSpec, TextureKind};
use crate::data::{load_dataset, load_image, Dataset, LoadOptions, Sample};
use crate::error::{Error, Result};
use crate::eval::{run_protocol, ModelScorer};
use crate::model::{load_checkpoint, save_checkpoint, score_images, ModelState};
use crate::saliency::Field2;
use crate::tensor::Tensor;
use crate::train::{prior_stats, train, LossContext, TrainSet};

#[derive(Parser, Debug)]
#[command(name = "saliencycut", version, about = "Saliency-guided pseudo anomalies and two-head deviation scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed; overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root directory for run folders.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Ppm,
    Png,
}

impl From<FormatArg> for ImageFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Ppm => ImageFormat::Pnm,
            FormatArg::Png => ImageFormat::Png,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolMode {
    Saliencycut,
    RandomCutPaste,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ForcedMask {
    Ones,
    Zeros,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic defect-texture corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "stripes")]
        texture: String,
        #[arg(long, default_value_t = 200)]
        normals: usize,
        /// Defect counts, e.g. blotch=20,scratch=20,hole=20.
        #[arg(long, default_value = "blotch=20,scratch=20,hole=20")]
        defects: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value = "ppm")]
        format: FormatArg,
    },
    /// Write pseudo anomalies built from a dataset's normals.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model used for saliency; a seeded fresh model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, value_enum, default_value = "saliencycut")]
        mode: PoolMode,
        /// Also write saliency maps and masks as PGM.
        #[arg(long)]
        dump_saliency: bool,
        #[arg(long, value_enum, default_value = "ppm")]
        format: FormatArg,
        #[arg(long, value_enum, hide = true)]
        force_mask: Option<ForcedMask>,
    },
    /// Train on a dataset and write a checkpoint plus log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score images with a checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Run an evaluation protocol and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for item in raw {
        match item.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
            None => bad.push(format!("--set {item:?} is not key=value")),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(bad.join("; ")))
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut overrides = parse_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    RunConfig::resolve_file(common.config.as_deref(), &overrides)
}

/// Creates `<out>/<command>-<seed>-<digest>`, where the digest covers the
/// resolved config and the command's own arguments.
fn run_dir(common: &Common, command: &str, cfg: &RunConfig, extra: &str) -> Result<PathBuf> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(cfg.to_text().as_bytes());
    h.update(extra.as_bytes());
    let digest = h.finalize();
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    let dir = common.out.join(format!("{command}-{}-{hex}", cfg.seed));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let text = cfg.to_text();
    log::info!("resolved config:\n{text}");
    let cfg_path = dir.join("config.txt");
    std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(dir)
}

fn load_opts(cfg: &RunConfig) -> LoadOptions {
    LoadOptions {
        input_size: cfg.train.arch.input_size,
        channels: cfg.train.arch.in_channels,
    }
}

fn field_raster(field: &Field2) -> Raster {
    Raster {
        width: field.width,
        height: field.height,
        channels: 1,
        pixels: field.data.iter().map(|&v| quantize(v)).collect(),
    }
}

fn cmd_synth(common: &Common, texture: &str, normals: usize, defects: &str, size: usize, format: FormatArg) -> Result<serde_json::Value> {
    let cfg = resolve(common)?;
    let spec = CorpusSpec {
        texture: texture.parse::<TextureKind>()?,
        normal_count: normals,
        defects: CorpusSpec::parse_defects(defects)?,
        size,
        format: format.into(),
    };
    spec.validate()?;
    let extra = format!("{texture}|{normals}|{defects}|{size}|{format:?}");
    let dir = run_dir(common, "synth", &cfg, &extra)?;
    let rows = write_corpus(&dir, &spec, cfg.seed)?;
    Ok(json!({ "command": "synth", "run_dir": dir, "samples": rows.len() }))
}

#[derive(Serialize)]
struct PseudoRow {
    path: String,
    source_a: String,
    source_b: String,
    salient_fraction: f64,
    seed: u64,
}

#[allow(clippy::too_many_arguments)]
fn cmd_augment(
    common: &Common,
    data: &Path,
    checkpoint: Option<&Path>,
    count: usize,
    mode: PoolMode,
    dump_saliency: bool,
    format: FormatArg,
    force_mask: Option<ForcedMask>,
) -> Result<serde_json::Value> {
    let cfg = resolve(common)?;
    let ds = load_dataset(data, load_opts(&cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => ModelState::init(cfg.train.arch.clone(), &mut rng)?,
    };
    let ctx = LossContext {
        prior: prior_stats(&mut rng, cfg.deviation.prior_count)?,
        margin: cfg.deviation.margin,
        head_targets: cfg.deviation.head_targets,
    };
    let normals: Vec<&Sample> = ds.normals.iter().collect();
    let pool_seed: u64 = rng.gen();
    let items: Vec<PoolItem> = match (mode, force_mask) {
        (PoolMode::RandomCutPaste, _) => generate_cut_paste_pool(&normals, count, pool_seed)?
            .into_iter()
            .map(|sample| PoolItem { sample, saliency: None })
            .collect(),
        (PoolMode::Saliencycut, forced) => {
            let source = match forced {
                Some(f) => MaskSource::Fixed(f == ForcedMask::Ones),
                None => MaskSource::Gradient {
                    model: &model,
                    cfg: &cfg.saliency,
                    ctx: &ctx,
                },
            };
            generate_pseudo_pool_items(&normals, &source, &PoolConfig::default(), count, pool_seed)?
        }
    };
    let extra = format!(
        "{}|{}|{count}|{mode:?}|{dump_saliency}|{format:?}|{force_mask:?}",
        data.display(),
        checkpoint.map(|p| p.display().to_string()).unwrap_or_default()
    );
    let dir = run_dir(common, "augment", &cfg, &extra)?;
    let pseudo_dir = dir.join("pseudo");
    std::fs::create_dir_all(&pseudo_dir).map_err(|e| Error::io(&pseudo_dir, e))?;
    if dump_saliency {
        let sal_dir = dir.join("saliency");
        std::fs::create_dir_all(&sal_dir).map_err(|e| Error::io(&sal_dir, e))?;
    }
    let mut rows = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let path = write_tensor_image(&pseudo_dir.join(format!("{i:04}")), &item.sample.image, format.into())?;
        if let (true, Some((map, mask))) = (dump_saliency, &item.saliency) {
            let sal_dir = dir.join("saliency");
            write_image(&sal_dir.join(format!("{i:04}_map.pgm")), &field_raster(&map.0), ImageFormat::Pnm)?;
            let bits = Raster {
                width: mask.width,
                height: mask.height,
                channels: 1,
                pixels: mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
            };
            write_image(&sal_dir.join(format!("{i:04}_mask.pgm")), &bits, ImageFormat::Pnm)?;
        }
        let p = &item.sample.provenance;
        rows.push(PseudoRow {
            path: path.strip_prefix(&dir).unwrap_or(&path).display().to_string(),
            source_a: p.source_a.clone(),
            source_b: p.source_b.clone(),
            salient_fraction: p.salient_fraction,
            seed: p.seed,
        });
    }
    write_csv(&dir.join("manifest.csv"), &rows)?;
    Ok(json!({ "command": "augment", "run_dir": dir, "samples": rows.len() }))
}

/// Training set: the split manifest's train ids when present, else everything.
fn train_set(ds: &Dataset) -> TrainSet<'_> {
    let keep = |s: &Sample| match &ds.split {
        Some(split) if !split.train.is_empty() => split.train.contains(&s.id),
        _ => true,
    };
    TrainSet {
        normals: ds.normals.iter().filter(|s| keep(s)).collect(),
        anomalies: ds.anomalies.iter().filter(|s| keep(s)).collect(),
    }
}

fn cmd_train(common: &Common, data: &Path) -> Result<serde_json::Value> {
    let cfg = resolve(common)?;
    let ds = load_dataset(data, load_opts(&cfg))?;
    let set = train_set(&ds);
    let validation: Option<Vec<&Sample>> = ds.split.as_ref().and_then(|split| {
        let v: Vec<&Sample> = ds.samples().filter(|s| split.test.contains(&s.id)).collect();
        let classes = (v.iter().any(|s| s.label == 0), v.iter().any(|s| s.label == 1));
        (classes == (true, true)).then_some(v)
    });
    let dir = run_dir(common, "train", &cfg, &data.display().to_string())?;
    let outcome = train(&set, &cfg.train, &cfg.deviation, &cfg.saliency, validation.as_deref())?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&outcome.model, &ckpt)?;
    write_csv(&dir.join("train_log.csv"), &outcome.log)?;
    let final_loss = outcome.log.last().map(|r| r.loss);
    Ok(json!({
        "command": "train",
        "run_dir": dir,
        "checkpoint": ckpt,
        "final_loss": final_loss,
        "validation_auc": outcome.validation_auc,
    }))
}

#[derive(Serialize)]
struct ImageScoreRow {
    path: String,
    phi1: f64,
    phi2: f64,
    score: f64,
}

fn cmd_score(common: &Common, checkpoint: &Path, images: &[PathBuf]) -> Result<serde_json::Value> {
    let cfg = resolve(common)?;
    let model = load_checkpoint(checkpoint)?;
    let opts = LoadOptions {
        input_size: model.arch().input_size,
        channels: model.arch().in_channels,
    };
    let tensors = images
        .iter()
        .map(|p| load_image(p, opts))
        .collect::<Result<Vec<Tensor>>>()?;
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let heads = score_images(&refs, &model)?;
    let extra: Vec<String> = std::iter::once(checkpoint)
        .chain(images.iter().map(PathBuf::as_path))
        .map(|p| p.display().to_string())
        .collect();
    let dir = run_dir(common, "score", &cfg, &extra.join("|"))?;
    let rows: Vec<ImageScoreRow> = images
        .iter()
        .zip(&heads)
        .map(|(p, h)| ImageScoreRow {
            path: p.display().to_string(),
            phi1: h.phi1,
            phi2: h.phi2,
            score: h.anomaly_score(),
        })
        .collect();
    let out = dir.join("scores.csv");
    write_csv(&out, &rows)?;
    Ok(json!({ "command": "score", "run_dir": dir, "scores": out, "count": rows.len() }))
}

fn cmd_eval(common: &Common, data: &Path) -> Result<serde_json::Value> {
    let cfg = resolve(common)?;
    let ds = load_dataset(data, load_opts(&cfg))?;
    let dir = run_dir(common, "eval", &cfg, &data.display().to_string())?;
    let mut scorer = ModelScorer {
        train: cfg.train.clone(),
        deviation: cfg.deviation.clone(),
        saliency: cfg.saliency.clone(),
    };
    let report = run_protocol(&ds, &cfg.protocol, &mut scorer, Some(&dir))?;
    let splits = dir.join("splits");
    std::fs::create_dir_all(&splits).map_err(|e| Error::io(&splits, e))?;
    for t in &report.trials {
        for (name, ids) in [("train", &t.train_ids), ("test", &t.test_ids)] {
            let p = splits.join(format!("seed{}_{name}.txt", t.seed));
            std::fs::write(&p, ids.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
        }
    }
    let path = dir.join("report.json");
    std::fs::write(&path, report.to_json()? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(json!({
        "command": "eval",
        "run_dir": dir,
        "report": path,
        "mean_auc": report.mean_auc,
        "std_auc": report.std_auc,
    }))
}

fn dispatch(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Synth {
            common,
            texture,
            normals,
            defects,
            size,
            format,
        } => cmd_synth(common, texture, *normals, defects, *size, *format),
        Command::Augment {
            common,
            data,
            checkpoint,
            count,
            mode,
            dump_saliency,
            format,
            force_mask,
        } => cmd_augment(
            common,
            data,
            checkpoint.as_deref(),
            *count,
            *mode,
            *dump_saliency,
            *format,
            *force_mask,
        ),
        Command::Train { common, data } => cmd_train(common, data),
        Command::Score {
            common,
            checkpoint,
            images,
        } => cmd_score(common, checkpoint, images),
        Command::Eval { common, data } => cmd_eval(common, data),
    }
}

/// Clap command with the config-key table appended to every help page.
pub fn command() -> clap::Command {
    let table = RunConfig::help_table();
    let mut cmd = Cli::command().after_help(table.clone());
    for sub in cmd.get_subcommands_mut() {
        *sub = sub.clone().after_help(table.clone());
    }
    cmd
}

/// Runs the CLI; returns the process exit code. Success prints one JSON
/// summary line on stdout, failure one JSON error line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            1
        }
    }
}
