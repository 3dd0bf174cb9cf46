mod commands;
mod plot;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memscore::datasets::{DatasetError, TargetFn};
use memscore::image::ImageError;
use memscore::models::{CheckpointError, Preset, Variant};
use memscore::training::TrainError;

#[derive(Parser, Debug)]
#[command(name = "memscore", version, about = "Train, evaluate and serve image memorability regressors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with train/val/test manifests.
    Synth(SynthArgs),
    /// Train one model with early stopping on a validation manifest.
    Train(TrainArgs),
    /// Train a grid of learning rates, momenta and batch sizes.
    Sweep(SweepArgs),
    /// Score a manifest and write the report, KDE curves and raw scores.
    Eval(EvalArgs),
    /// Activation-maximization images for filters of one layer.
    Vis(VisArgs),
    /// Render KDE or sweep-curve figures from CSV artifacts.
    Plot(PlotArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2500)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "texture_plus_category")]
    pub target: TargetFn,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1", value_delimiter = ',')]
    pub split: Vec<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Normalization {
    Imagenet,
    Identity,
}

/// Model and optimizer flags shared by `train` and `sweep`. Flags override
/// values from `--config`.
#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Training manifest (CSV or JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Validation manifest used for early stopping.
    #[arg(long)]
    pub val: PathBuf,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "tiny")]
    pub preset: Preset,
    #[arg(long, default_value = "memnet")]
    pub variant: Variant,
    #[arg(long, action = clap::ArgAction::Set, value_parser = clap::builder::BoolishValueParser::new())]
    pub frozen: Option<bool>,
    #[arg(long, value_enum, default_value_t = Normalization::Imagenet)]
    pub normalization: Normalization,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate every N steps instead of once per epoch.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Epochs of pretext pretraining for the backbone and segmenter,
    /// using the synthetic metadata of `--pretrain-manifest` (or
    /// `--manifest`).
    #[arg(long, default_value_t = 0)]
    pub pretrain_epochs: usize,
    #[arg(long)]
    pub pretrain_manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint path; the JSONL log goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "eta", value_delimiter = ',', default_value = "0.01,0.001")]
    pub etas: Vec<f64>,
    #[arg(long = "gamma", value_delimiter = ',', default_value = "0.9")]
    pub gammas: Vec<f64>,
    #[arg(long = "batch-size", value_delimiter = ',', default_value = "32")]
    pub batch_sizes: Vec<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report JSON. KDE and score CSVs are written next to it unless given.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub kde: Option<PathBuf>,
    #[arg(long)]
    pub preds: Option<PathBuf>,
    #[arg(long)]
    pub truths: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VisArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Layer id such as `trunk.conv1` or `backbone.block2`.
    #[arg(long)]
    pub layer: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub filters: Vec<usize>,
    /// Grid PNG; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1)]
    pub jitter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also find the most activating images of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PlotKind {
    Kde,
    Sweep,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Prediction CSV (`image_ref,score`) for `--kind kde`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Curves CSV from `sweep` for `--kind sweep`.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// SVG output path.
    #[arg(long, default_value = "figure.svg")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = "MEMSCORE_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Allowed CORS origin; repeat for several. Any origin if omitted.
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
    #[arg(long, default_value_t = memscore_service::DEFAULT_MAX_IMAGE_BYTES)]
    pub max_bytes: usize,
}

/// Failure classes with their exit codes; clap's usage errors exit with 2.
fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    use std::io::ErrorKind::NotFound;
    for cause in err.chain() {
        let missing = match cause.downcast_ref::<std::io::Error>() {
            Some(e) => e.kind() == NotFound,
            None => false,
        } || matches!(cause.downcast_ref::<DatasetError>(), Some(DatasetError::Io { source, .. }) if source.kind() == NotFound)
            || matches!(cause.downcast_ref::<CheckpointError>(), Some(CheckpointError::Io { source, .. }) if source.kind() == NotFound)
            || matches!(cause.downcast_ref::<ImageError>(), Some(ImageError::Io { source, .. }) if source.kind() == NotFound);
        if missing {
            return (3, "missing file");
        }
        if matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Diverged { .. })) {
            return (5, "training diverged");
        }
        if matches!(
            cause.downcast_ref::<DatasetError>(),
            Some(DatasetError::Parse { .. } | DatasetError::Domain { .. } | DatasetError::DuplicateRef(_))
        ) || matches!(
            cause.downcast_ref::<CheckpointError>(),
            Some(CheckpointError::Version(_) | CheckpointError::Truncated | CheckpointError::Header(_))
        ) || cause.downcast_ref::<serde_json::Error>().is_some()
            || cause.downcast_ref::<csv::Error>().is_some()
        {
            return (4, "parse error");
        }
    }
    (1, "error")
}

/// The error chain on one line, skipping causes already quoted by their
/// parent's message.
fn one_line(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string().replace('\n', " ");
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Eval(a) => commands::eval(a),
        Command::Vis(a) => commands::vis(a),
        Command::Plot(a) => plot::plot(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, class) = exit_code(&e);
            eprintln!("memscore: {class}: {}", one_line(&e));
            ExitCode::from(code)
        }
    }
}
