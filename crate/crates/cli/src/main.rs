mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use cactuskit::dataset::Split;
use cactuskit::report::ReportFormat;
use cactuskit::{Interpolation, LabelFormat};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Serialize, Serializer};

use crate::config::{UsageError, OUT_DIR_ENV};

/// Dataset preparation, evaluation and benchmarking for plant disease detectors.
#[derive(Debug, Parser)]
#[command(name = "cactuskit", version)]
struct Cli {
    /// TOML config file; flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory every output is written to.
    #[arg(long, global = true, env = OUT_DIR_ENV, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Class taxonomy TOML (default: built-in six cactus classes).
    #[arg(long, global = true, value_name = "FILE")]
    taxonomy: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a manifest (and optionally a label tree) and list violations.
    Validate(ValidateArgs),
    /// Assign train/val/test splits, stratified by class.
    Split(SplitArgs),
    /// Add rotated copies of every record.
    Augment(AugmentArgs),
    /// Write the images/labels training tree.
    Materialize(MaterializeArgs),
    /// Convert label files between corner and normalized formats.
    Convert(ConvertArgs),
    /// Score predictions against the manifest.
    Eval(EvalArgs),
    /// Class confusion matrix at one operating point.
    Confusion(EvalArgs),
    /// Training log tools.
    Trainlog {
        #[command(subcommand)]
        action: TrainlogCommand,
    },
    /// Measure per-image latency of a detector backend.
    Bench(BenchArgs),
    /// Run a detector backend and write a prediction file.
    Predict(PredictArgs),
    /// Combine evaluation, latency and training-log artifacts into one document.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Root of a materialized tree whose labels are checked against the manifest.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    format: Option<LabelFormat>,
}

#[derive(Debug, Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    train: Option<f64>,
    #[arg(long)]
    val: Option<f64>,
    #[arg(long)]
    test: Option<f64>,
    /// Keep all rotations of one image in the same split.
    #[arg(long)]
    group_augmented: bool,
}

#[derive(Debug, Args, Serialize)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "90,180,270")]
    angles: Vec<u32>,
}

#[derive(Debug, Args, Serialize)]
struct MaterializeArgs {
    /// Manifest with split assignments.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory the records' image paths are relative to.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    format: Option<LabelFormat>,
    /// Name of the tree inside the output directory.
    #[arg(long, default_value = "dataset")]
    name: String,
}

#[derive(Debug, Args, Serialize)]
struct ConvertArgs {
    /// A label file or a directory of `.txt` label files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    from: LabelFormat,
    #[arg(long)]
    to: LabelFormat,
    #[arg(long, requires = "height")]
    width: Option<u32>,
    #[arg(long, requires = "width")]
    height: Option<u32>,
    /// Looks up image dimensions by file stem.
    #[arg(long, conflicts_with = "width")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Prediction file: `image_id class confidence x_min y_min x_max y_max` per line.
    #[arg(long, required_unless_present = "replay_ground_truth")]
    predictions: Option<PathBuf>,
    /// Use the ground truth itself as predictions.
    #[arg(long, conflicts_with = "predictions")]
    replay_ground_truth: bool,
    /// Restrict to one split.
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    interpolation: Option<Interpolation>,
}

#[derive(Debug, Subcommand)]
enum TrainlogCommand {
    /// Normalize a log to canonical rows (JSON).
    Parse(LogArgs),
    /// Best epochs per criterion and the loss series.
    Summarize(LogArgs),
    /// Export selected columns as CSV.
    Export(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
struct LogArgs {
    #[arg(long)]
    log: PathBuf,
    /// Extra header aliases, one `alias = column` per line.
    #[arg(long)]
    aliases: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ExportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    log: LogArgs,
    #[arg(long, value_delimiter = ',')]
    fields: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum BackendKind {
    Oracle,
    Replay,
    Delay,
    External,
}

#[derive(Debug, Args, Serialize)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    backend: BackendKind,
    /// Prediction file for the replay backend.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    delay_ms: f64,
    /// Program for the external backend.
    #[arg(long)]
    program: Option<PathBuf>,
    #[arg(long = "program-arg", allow_hyphen_values = true)]
    program_args: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    jitter_px: f64,
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    ghost_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    misclass_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    confidence_floor: f64,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    split: Option<Split>,
    /// Apply class-aware NMS at this IoU.
    #[arg(long)]
    nms: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// TOML with `[[entry]]` tables of recorded figures.
    #[arg(long)]
    recorded: Option<PathBuf>,
    /// Backend name the artifacts below belong to.
    #[arg(long, default_value = "model")]
    name: String,
    /// `eval.json` from the eval subcommand.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// `latency.json` from the bench subcommand.
    #[arg(long)]
    latency: Option<PathBuf>,
    /// Training log CSV or a summary JSON.
    #[arg(long)]
    trainlog: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    #[serde(serialize_with = "as_display")]
    format: ReportFormat,
}

fn as_display<T: std::fmt::Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::Failed) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
