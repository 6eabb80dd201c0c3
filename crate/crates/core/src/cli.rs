//! Command-line entry points: `synth`, `train`, `evaluate`, `predict`.
//!
//! Each command returns a process exit code: 0 on success, 1 on a runtime
//! failure, 2 on a configuration error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::cam::{compute_cam, overlay};
use crate::config::{keys_help, RunConfig};
use crate::dataset::{
    images_to_tensor, load_dataset, read_image, resize_image, split_dataset, write_mask_png, write_rgb_png,
};
use crate::error::{Error, Result};
use crate::metrics::{binarize, evaluate, upsample_probs, MetricsReport};
use crate::model::{ColonNet, Predictor};
use crate::render::draw_bbox;
use crate::synthgen::{generate, write_dataset, SynthConfig};
use crate::trainer::{run_full_schedule, TrainingReport};

/// Checkpoint metadata key holding the full run config text.
pub const RUN_CONFIG_META: &str = "run_config";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";
/// Wall-clock timings, kept apart so `report.json` is byte-identical across reruns.
pub const TIMINGS_FILE: &str = "timings.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";

#[derive(Debug, Parser)]
#[command(name = "colonnet", version, about = "Bleeding classification, detection and segmentation for capsule endoscopy frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Run the three training stages and write a checkpoint and report.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Evaluate(EvaluateArgs),
    /// Write bbox, mask and CAM images plus a JSON line for each input image.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Fraction of bleeding samples.
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (images/, masks/, annotations.csv).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Which part of the dataset to score, using the checkpoint's seed and train fraction.
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    /// Output directory for metrics.json and metrics.txt (default: next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input images.
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let help = keys_help();
    let mut cmd = Cli::command();
    for name in ["synth", "train", "evaluate", "predict"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match Cli::from_arg_matches(&matches) {
        Ok(cli) => run(cli.command),
        Err(e) => {
            let _ = e.print();
            2
        }
    }
}

pub fn run(command: Command) -> i32 {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Predict(a) => cmd_predict(&a),
    }
}

fn fail(code: i32, err: impl std::fmt::Display) -> i32 {
    eprintln!("error: {err}");
    code
}

pub fn cmd_synth(args: &SynthArgs) -> i32 {
    let cfg = SynthConfig {
        image_size: args.size,
        bleeding_fraction: args.fraction,
        ..SynthConfig::new(args.n, args.seed)
    };
    let result = generate(&cfg).and_then(|samples| write_dataset(&samples, &args.out).map(|()| samples.len()));
    match result {
        Ok(n) => {
            println!("wrote {n} samples to {}", args.out.display());
            0
        }
        Err(e @ Error::InvalidArgument(_)) => fail(2, e),
        Err(e) => fail(1, e),
    }
}

/// Reads the config file (if any), applies `--set` overrides and the seed variable.
pub fn load_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::ConfigSyntax { line: 0, message: format!("override {kv:?} is not key=value") })?;
        cfg.set(k.trim(), v)?;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> i32 {
    let cfg = match load_run_config(args) {
        Ok(c) => c,
        Err(e @ Error::Io(_)) => return fail(2, format!("cannot read config: {e}")),
        Err(e) => return fail(2, e),
    };
    match train(&cfg) {
        Ok(report) => {
            if let Some(m) = &report.final_metrics {
                print!("{}", m.to_table());
            }
            println!("wrote {}", cfg.output_dir.display());
            0
        }
        Err(e) => fail(1, e),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Trains from a validated config and writes checkpoint and report to `output.dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainingReport> {
    let samples = load_dataset(&cfg.dataset_root)?;
    let (train, val) = split_dataset(samples, cfg.train_fraction, cfg.seed)?;
    let model = ColonNet::new(&cfg.model_config(), cfg.seed)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let report_path = cfg.output_dir.join(REPORT_FILE);
    let report = match run_full_schedule(&model, &train, &val, &cfg.schedule()) {
        Ok(r) => r,
        Err(e) => {
            write_json(&e.partial, &report_path)?;
            return Err(e.source);
        }
    };
    write_json(&report, &report_path)?;
    write_json(&Timings::from(&report), &cfg.output_dir.join(TIMINGS_FILE))?;
    let meta = BTreeMap::from([(RUN_CONFIG_META.to_string(), cfg.to_text())]);
    model.save(&cfg.output_dir.join(CHECKPOINT_FILE), &meta)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct StageTimings {
    name: &'static str,
    seconds: f64,
    epoch_seconds: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Timings {
    seconds: f64,
    stages: Vec<StageTimings>,
}

impl From<&TrainingReport> for Timings {
    fn from(r: &TrainingReport) -> Self {
        let stages = r
            .stages
            .iter()
            .map(|s| StageTimings {
                name: s.name.as_str(),
                seconds: s.seconds,
                epoch_seconds: s.epoch_reports.iter().map(|e| e.seconds).collect(),
            })
            .collect();
        Self { seconds: r.seconds, stages }
    }
}

/// Loads a checkpoint and the run config stored with it (defaults if absent).
pub fn load_checkpoint(path: &Path) -> Result<(ColonNet, RunConfig)> {
    let (model, meta) = ColonNet::load(path)?;
    let cfg = match meta.get(RUN_CONFIG_META) {
        Some(text) => RunConfig::parse_str(text)?,
        None => RunConfig::default(),
    };
    Ok((model, cfg))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> i32 {
    let (model, cfg) = match load_checkpoint(&args.checkpoint) {
        Ok(x) => x,
        Err(e) => return fail(1, format!("cannot load checkpoint {}: {e}", args.checkpoint.display())),
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    let result = (|| -> Result<MetricsReport> {
        let samples = load_dataset(&args.dataset)?;
        let samples = match args.split {
            Split::All => samples,
            Split::Train => split_dataset(samples, cfg.train_fraction, cfg.seed)?.0,
            Split::Val => split_dataset(samples, cfg.train_fraction, cfg.seed)?.1,
        };
        let report = evaluate(&model, &samples, &cfg.thresholds)?;
        fs::create_dir_all(&out)?;
        write_json(&report, &out.join(METRICS_JSON))?;
        fs::write(out.join(METRICS_TABLE), report.to_table())?;
        Ok(report)
    })();
    match result {
        Ok(report) => {
            print!("{}", report.to_table());
            0
        }
        Err(e) => fail(1, e),
    }
}

/// Contents of `<id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub bleed_prob: f64,
    pub bleeding: bool,
    /// `[x_min, y_min, x_max, y_max]`, normalized.
    pub bbox: [f64; 4],
}

/// Writes `<id>_bbox.png`, `<id>_mask.png`, `<id>_cam.png` and `<id>.json` for one image.
pub fn predict_image(model: &ColonNet, cfg: &RunConfig, image_path: &Path, out: &Path) -> Result<PredictionRecord> {
    let image = read_image(image_path)?;
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::InvalidArgument(format!("no file name in {}", image_path.display())))?;
    let (h, w, _) = image.dim();
    let s = model.input_size();
    let resized = resize_image(&image, s, s);
    let pred = model
        .predict_batch(&images_to_tensor(&[&resized], &Device::Cpu)?)?
        .pop()
        .ok_or(Error::EmptyDataset)?;
    let bleeding = pred.bleed_prob >= cfg.thresholds.classification;

    fs::create_dir_all(out)?;
    let boxed = if bleeding { draw_bbox(&image, &pred.bbox, [0.0, 1.0, 0.0], 2) } else { image.clone() };
    write_rgb_png(&boxed, &out.join(format!("{id}_bbox.png")))?;
    let mask = binarize(&upsample_probs(&pred.mask_probs, h, w), cfg.thresholds.mask);
    write_mask_png(&mask, &out.join(format!("{id}_mask.png")))?;
    let heatmap = compute_cam(model, &image)?;
    write_rgb_png(&overlay(&image, &heatmap.upsampled, cfg.cam_alpha)?, &out.join(format!("{id}_cam.png")))?;

    let record = PredictionRecord { id: id.clone(), bleed_prob: pred.bleed_prob, bleeding, bbox: pred.bbox.to_array() };
    fs::write(out.join(format!("{id}.json")), serde_json::to_string(&record)? + "\n")?;
    Ok(record)
}

pub fn cmd_predict(args: &PredictArgs) -> i32 {
    let (model, cfg) = match load_checkpoint(&args.checkpoint) {
        Ok(x) => x,
        Err(e) => return fail(1, format!("cannot load checkpoint {}: {e}", args.checkpoint.display())),
    };
    for path in &args.images {
        match predict_image(&model, &cfg, path, &args.out) {
            Ok(r) => println!("{}: bleed_prob {:.4}", r.id, r.bleed_prob),
            Err(e) => return fail(1, format!("{}: {e}", path.display())),
        }
    }
    0
}
