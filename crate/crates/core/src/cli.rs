//! Command-line front end: `generate`, `train`, `eval`, `bench`, `ablate`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ExperimentConfig, Overrides};
use crate::data::{load_dataset, render_scene, save_sample, scene_specs, write_manifest, DatasetManifest, ManifestEntry, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{calibration_curve, evaluate_dataset, render_overlay, MetricReport};
use crate::model::{build_variant, GlassNet, Variant};
use crate::train::{benchmark_speed, checkpoint, train, SpeedReport, TrainHistory};

#[derive(Debug, Parser)]
#[command(name = "glass-seg", version, about = "Glass segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML experiment config
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset split
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Train one variant
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/latest.safetensors`
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/best.safetensors`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directories; defaults to `data.val_dirs`
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        overlays: bool,
        #[arg(long)]
        calibration: bool,
    },
    /// Time single-image forward passes
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        passes: Option<usize>,
    },
    /// Train and score several variants with one seed
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL)]
        variants: Vec<Variant>,
    },
}

/// Successful completion, possibly with a warning worth a distinct exit code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Warning(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_WARNING: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn exit_code(r: &Result<Outcome>) -> i32 {
    match r {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::Warning(_)) => EXIT_WARNING,
        Err(e) if e.is_validation() => EXIT_VALIDATION,
        Err(_) => EXIT_RUNTIME,
    }
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::resolve(c.config.as_deref(), &Overrides { variant: c.variant, seed: c.seed, output_dir: c.out.clone() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(out)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Generate { common, count, split } => cmd_generate(&resolve(&common)?, count, split),
        Command::Train { common, resume } => cmd_train(&resolve(&common)?, resume).map(|_| Outcome::Done),
        Command::Eval { common, checkpoint, data, overlays, calibration } => {
            cmd_eval(&resolve(&common)?, checkpoint.as_deref(), &data, overlays, calibration).map(|_| Outcome::Done)
        }
        Command::Bench { common, checkpoint, passes } => cmd_bench(&resolve(&common)?, checkpoint.as_deref(), passes).map(|_| Outcome::Done),
        Command::Ablate { common, variants } => cmd_ablate(&resolve(&common)?, &variants).map(|_| Outcome::Done),
    }
}

/// Writes `images/`, `masks/` and `manifest.json` for `count` scenes of `split`.
pub fn cmd_generate(cfg: &ExperimentConfig, count: Option<usize>, split: Split) -> Result<Outcome> {
    let count = count.unwrap_or(match split {
        Split::Train => cfg.data.train_count,
        _ => cfg.data.val_count,
    });
    let out = cfg.output_dir.clone();
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;
    let mut entries = Vec::with_capacity(count);
    for spec in scene_specs(&cfg.data, cfg.seed, split, count) {
        let (rgb, mask) = render_scene(&spec)?;
        let id = format!("scene_{:016x}", spec.seed);
        save_sample(&out, &id, &rgb, &mask)?;
        entries.push(ManifestEntry { id, seed: spec.seed, background: spec.background });
    }
    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        dataset_seed: cfg.seed,
        split: split.name().to_string(),
        canvas_size: cfg.data.image_side,
        rng: "chacha8".into(),
        scene: cfg.data.scene.clone(),
        entries,
    };
    write_manifest(&out, &manifest)?;
    if count == 0 {
        let msg = format!("generated an empty {} split", split.name());
        log::warn!("{msg}");
        return Ok(Outcome::Warning(msg));
    }
    Ok(Outcome::Done)
}

/// Report and history of one training run.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub report: MetricReport,
    pub history: TrainHistory,
    pub out: PathBuf,
}

fn load_split(dirs: &[String], cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let samples = load_dataset(dirs, &cfg.data.normalization)?;
    if samples.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(samples)
}

pub fn train_with(cfg: &ExperimentConfig, train_set: &[Sample], val_set: &[Sample], resume: bool) -> Result<TrainArtifacts> {
    let out = prepare_out(cfg)?;
    let mut model = build_variant::<f32>(&cfg.model_config(), cfg.seed)?;
    let mut run = cfg.train_run();
    run.checkpoint_dir = Some(out.clone());
    run.resume = resume;
    let result = train(&mut model, train_set, val_set, &cfg.train, &run)?;
    fs::write(out.join("history_steps.csv"), result.history.steps_csv())?;
    fs::write(out.join("history_epochs.csv"), result.history.epochs_csv())?;
    let mut report = result.final_report.ok_or(Error::Empty("validation report"))?;
    report.config_hash = Some(cfg.hash());
    report.seed = Some(cfg.seed);
    write_json(&out.join("val_report.json"), &report)?;
    Ok(TrainArtifacts { report, history: result.history, out })
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<TrainArtifacts> {
    let train_set = load_split(&cfg.data.train_dirs, cfg)?;
    let val_set = load_split(&cfg.data.val_dirs, cfg)?;
    train_with(cfg, &train_set, &val_set, resume)
}

/// Builds the configured model and loads `path`, refusing checkpoints written
/// for a different model configuration.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<GlassNet<f32>> {
    let mut model = build_variant::<f32>(&cfg.model_config(), cfg.seed)?;
    if !path.is_file() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let manifest = checkpoint::read_manifest(&bytes)?;
    let expected = model.config.hash();
    if manifest.model_config_hash != expected {
        return Err(Error::ConfigHashMismatch { expected, found: manifest.model_config_hash });
    }
    checkpoint::load_into(&bytes, &mut model.store, None)?;
    Ok(model)
}

pub fn cmd_eval(cfg: &ExperimentConfig, ckpt: Option<&Path>, data: &[PathBuf], overlays: bool, calibration: bool) -> Result<MetricReport> {
    let out = cfg.output_dir.clone();
    let ckpt = ckpt.map(Path::to_path_buf).unwrap_or_else(|| out.join("best.safetensors"));
    let model = load_model(cfg, &ckpt)?;
    let dirs: Vec<String> = if data.is_empty() { cfg.data.val_dirs.clone() } else { data.iter().map(|p| p.to_string_lossy().into_owned()).collect() };
    let samples = load_split(&dirs, cfg)?;
    let samples: Vec<Sample> = if cfg.data.native_resolution_eval {
        samples
    } else {
        samples.iter().map(|s| crate::data::resize_pair(s, cfg.data.image_side)).collect::<Result<_>>()?
    };
    let (mut report, confs) = evaluate_dataset(&model, &samples, Some(cfg.data.image_side), cfg.train.eval_batch_size, &cfg.metrics)?;
    report.config_hash = Some(cfg.hash());
    report.seed = Some(cfg.seed);
    fs::create_dir_all(&out)?;
    write_json(&out.join("eval_report.json"), &report)?;
    if overlays {
        let dir = out.join("overlays");
        fs::create_dir_all(&dir)?;
        for (s, c) in samples.iter().zip(&confs) {
            let rgb = s.image.to_rgb8(&cfg.data.normalization);
            render_overlay(&rgb, &c.binarize(cfg.metrics.threshold), &s.mask)?.save(dir.join(format!("{}.png", s.id)))?;
        }
    }
    if calibration {
        let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
        calibration_curve(&confs, &gts, cfg.metrics.n_bins)?.save(&out.join("calibration.csv"), &out.join("calibration.png"))?;
    }
    Ok(report)
}

/// Without a checkpoint the freshly initialised model is timed.
pub fn cmd_bench(cfg: &ExperimentConfig, ckpt: Option<&Path>, passes: Option<usize>) -> Result<SpeedReport> {
    let model = match ckpt {
        Some(p) => load_model(cfg, p)?,
        None => build_variant::<f32>(&cfg.model_config(), cfg.seed)?,
    };
    let mut bench = cfg.bench.clone();
    if let Some(n) = passes {
        bench.n_passes = n;
    }
    let mut report = benchmark_speed(&model, &bench, cfg.data.image_side)?;
    report.config_hash = Some(cfg.hash());
    report.seed = Some(cfg.seed);
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("speed.json"), &report)?;
    Ok(report)
}

pub const ABLATION_HEADER: &str = "variant,seed,config_hash,iou,f_beta,mae,ber";

/// Trains every variant under the same seed and data, writing `ablation.csv`.
pub fn ablate_with(cfg: &ExperimentConfig, variants: &[Variant], train_set: &[Sample], val_set: &[Sample]) -> Result<Vec<(Variant, MetricReport)>> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no variants requested".into()));
    }
    let root = cfg.output_dir.clone();
    fs::create_dir_all(&root)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut rows = Vec::new();
    for &v in variants {
        let mut c = cfg.clone();
        c.variant = v;
        c.output_dir = root.join(v.name());
        let a = train_with(&c, train_set, val_set, false)?;
        let r = &a.report;
        let _ = writeln!(csv, "{},{},{},{},{},{},{}", v, c.seed, c.hash(), r.iou, r.f_beta, r.mae, r.ber);
        rows.push((v, a.report));
    }
    fs::write(root.join("ablation.csv"), csv)?;
    Ok(rows)
}

pub fn cmd_ablate(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<(Variant, MetricReport)>> {
    let train_set = load_split(&cfg.data.train_dirs, cfg)?;
    let val_set = load_split(&cfg.data.val_dirs, cfg)?;
    ablate_with(cfg, variants, &train_set, &val_set)
}
