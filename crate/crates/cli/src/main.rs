//! `sinn`: generate synthetic data, train, evaluate and predict.

mod commands;
mod observe;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sinn_core::{ObservationMode, Variant};

#[derive(Parser)]
#[command(name = "sinn", version, about = "Structured inference networks over layered label graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset consistent with a label graph.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainCmd),
    /// Evaluate a checkpoint, or train and evaluate over seeded splits.
    Eval(EvalCmd),
    /// Rank labels per layer for every sample of a dataset.
    Predict(PredictCmd),
    /// Train and evaluate several variants over the same splits.
    Compare(CompareCmd),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    flip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ObsArgs {
    /// How observed labels become activations: `inverse` or `logit`.
    #[arg(long, default_value = "inverse")]
    obs_mode: ObservationMode,
    #[arg(long, default_value_t = 0.001)]
    epsilon: f64,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 25.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.0005)]
    wd: f64,
    /// Learning-rate multiplier applied every `--lr-step` epochs.
    #[arg(long, default_value_t = 0.1)]
    lr_decay: f64,
    #[arg(long)]
    lr_step: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layer names whose true targets are sometimes fed in as observations
    /// during training.
    #[arg(long, value_delimiter = ',')]
    reveal: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    reveal_prob: f64,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "sinn")]
    variant: Variant,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    obs: ObsArgs,
    /// Train on this fraction of a split seeded by `--seed` instead of the
    /// whole file.
    #[arg(long)]
    train_frac: Option<f64>,
    /// Checkpoint output path.
    #[arg(long)]
    ckpt: PathBuf,
    /// Per-epoch log as line-delimited JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[arg(long, default_value_t = 3)]
    topn: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Layer names whose true targets are revealed at prediction time.
    #[arg(long, value_delimiter = ',')]
    observe: Vec<String>,
    /// Print `key=value` records instead of tables.
    #[arg(long)]
    machine: bool,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate. Without one, `--variant` is trained on each
    /// split.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "sinn")]
    variant: Variant,
    /// Number of seeded train/test splits; 0 evaluates on the whole file.
    #[arg(long, default_value_t = 0)]
    splits: usize,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[command(flatten)]
    eval: EvalArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    obs: ObsArgs,
}

#[derive(Args)]
struct PredictCmd {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Observation file: one JSON object per line with `id`, `layer` and
    /// `positive` (labels of that layer known to be present).
    #[arg(long)]
    observe: Option<PathBuf>,
    /// Labels listed per layer; 0 lists all.
    #[arg(long, default_value_t = 0)]
    topn: usize,
    #[command(flatten)]
    obs: ObsArgs,
    /// One JSON object per sample instead of text.
    #[arg(long)]
    machine: bool,
}

#[derive(Args)]
struct CompareCmd {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "logistic,topdown,binn,sinn")]
    variants: Vec<Variant>,
    #[arg(long, default_value_t = 5)]
    splits: usize,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[command(flatten)]
    eval: EvalArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    obs: ObsArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Compare(a) => commands::compare(&a),
    };
    match result {
        Ok(text) => {
            // a closed pipe (e.g. `| head`) is not a failure
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
