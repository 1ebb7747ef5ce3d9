use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod inputs;

#[derive(Parser)]
#[command(name = "pllforge", version, about = "Partial-label benchmark for multi-label signal classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-label dataset with features and a treatment matrix.
    Synth(SynthArgs),
    /// Validate an on-disk dataset and write a normalised copy.
    Ingest(IngestArgs),
    /// Add candidate labels to a clean dataset.
    Ambiguate(AmbiguateArgs),
    /// Train one learner per seed.
    Train(TrainArgs),
    /// Score a saved model on a dataset split.
    Eval(EvalArgs),
    /// Run every (strategy, p, epsilon, algorithm, seed) cell.
    Sweep(SweepArgs),
    /// Report candidate statistics of a dataset.
    Analyze(AnalyzeArgs),
    /// Render a sweep directory into degradation and per-class tables.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub leads: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub superclasses: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct IngestArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Feature table to validate and copy alongside the dataset.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Default)]
pub struct MatrixArgs {
    /// Class-level matrix for the treatment strategy.
    #[arg(long)]
    pub treatment: Option<PathBuf>,
    /// Instance-level matrix for the model-driven strategy.
    #[arg(long)]
    pub model_matrix: Option<PathBuf>,
    /// Feature table for the cardiologist strategies.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Args)]
pub struct AmbiguateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub matrices: MatrixArgs,
}

#[derive(Args, Clone, Default)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub algorithm: Option<String>,
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// linear, mlp or resnet.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub r: Option<usize>,
    #[command(flatten)]
    pub matrices: MatrixArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// test or train.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    #[arg(long = "p-grid", value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    #[arg(long = "epsilon-grid", value_delimiter = ',')]
    pub epsilon: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<String>>,
    #[arg(long)]
    pub r: Option<usize>,
    #[command(flatten)]
    pub matrices: MatrixArgs,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Record wall-clock runtime per cell; output is then not byte-stable.
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub sweep: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<pllforge_core::CoreError>()
            .is_some_and(|c| c.is_validation())
            || e.downcast_ref::<commands::UsageError>().is_some()
    });
    if validation {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if !matches!(cli.command, Command::Sweep(_)) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let res = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Ingest(a) => commands::ingest(a),
        Command::Ambiguate(a) => commands::ambiguate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Report(a) => commands::report(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
