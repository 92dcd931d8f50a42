//! `tint`: synthesize data, train, evaluate, predict, check gradients and
//! export saliency maps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Results go to stdout as `key=value` lines; diagnostics go to stderr.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Preset;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<tint_core::Error> for CliError {
    fn from(e: tint_core::Error) -> Self {
        use tint_core::Error as E;
        let code = match &e {
            E::NonFinite { .. } | E::Diverged(_) => 3,
            E::Config(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tint", version, about = "Typhoon intensity regression with a windowed vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic vortex dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Report RMSE (knots) of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict the intensity of every frame in a tensor file.
    Predict(PredictArgs),
    /// Finite-difference gradient check of every block and the full model.
    Gradcheck(GradcheckArgs),
    /// Export an input-gradient saliency map as a binary PGM.
    Saliency(SaliencyArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of samples (split 80/10/10).
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated modalities from ir, wv, pmw.
    #[arg(long, default_value = "ir")]
    pub channels: String,
    /// Side length of the generated frames.
    #[arg(long, default_value_t = tint_core::data::synth::NATIVE_SIZE)]
    pub size: usize,
    /// Frames generated per synthetic storm.
    #[arg(long, default_value_t = 4)]
    pub frames_per_storm: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (or manifest file).
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with optional [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base model configuration that the config file and flags modify.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds parameter initialization, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of the dataset's modalities.
    #[arg(long)]
    pub channels: Option<String>,
    /// Disable rotation and flip augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from a checkpoint written by an earlier run (`last.ckpt`).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write per-sample predictions and residuals (TSV).
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// TNSR file holding one [C, H, W] frame or a stack [N, C, H, W].
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// TOML file with an optional [model] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Test)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error for individual blocks.
    #[arg(long, default_value_t = tint_core::gradcheck::BLOCK_THRESHOLD)]
    pub threshold: f64,
    /// Largest accepted relative error for the full-model loss.
    #[arg(long, default_value_t = tint_core::gradcheck::MODEL_THRESHOLD)]
    pub model_threshold: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = tint_core::gradcheck::DEFAULT_EPS)]
    pub eps: f64,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// TNSR file holding one [C, H, W] frame or a stack [N, C, H, W].
    #[arg(long)]
    pub input: PathBuf,
    /// Output PGM path.
    #[arg(long)]
    pub out: PathBuf,
    /// Frame of a stacked input to explain.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
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
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Saliency(a) => commands::saliency(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
