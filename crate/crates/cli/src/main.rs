//! `mmcd`: synthesise datasets, train, evaluate, predict and export prior maps.
//!
//! Exit codes: 0 ok, 2 usage or invalid configuration, 3 I/O, 4 training
//! diverged, 5 incompatible checkpoint.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmcd_core::head::ClassWeightMode;
use mmcd_core::model::Variant;
use mmcd_core::synth::Split;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] mmcd_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use mmcd_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Image { .. } | E::Json(_) => 3,
                E::Diverged { .. } => 4,
                E::IncompatibleCheckpoint(_) => 5,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmcd", version, about = "Optical/SAR change detection on synthetic scenes")]
#[command(after_help = "Precedence: built-in defaults < --config file < command-line flags.")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream the command uses.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving all artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write the predicted label map of one sample.
    Predict(SampleArgs),
    /// Write the per-scale change-intensity maps of one sample.
    InspectPrior(SampleArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root written by `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `inverse_frequency` or `uniform`.
    #[arg(long, value_parser = parse_weights)]
    pub class_weights: Option<ClassWeightMode>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub val_interval: Option<usize>,
    /// Skip validation during training.
    #[arg(long)]
    pub no_val: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Score predictions against themselves (harness check; OA is 1).
    #[arg(long)]
    pub self_score: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint to load; `inspect-prior` builds a freshly initialised full model without one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample directory holding opt.png, sar.png and label.png.
    #[arg(long)]
    pub sample: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn parse_weights(s: &str) -> Result<ClassWeightMode, String> {
    match s {
        "inverse_frequency" => Ok(ClassWeightMode::InverseFrequency),
        "uniform" => Ok(ClassWeightMode::Uniform),
        _ => Err(format!("unknown class weighting {s:?}; valid: inverse_frequency, uniform")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
