//! `mtsnet` command-line tool.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
//! 3 data error, 4 checkpoint mismatch.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtsnet::Error;

#[derive(Parser, Debug)]
#[command(name = "mtsnet", version, about = "Stenosis classification on CT clips with (2+1)D ResNets and attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// mtsnet, r2p1d or r3d
    #[arg(long)]
    pub model: Option<String>,
    /// dep_mhsa, mhsa3d, mhsa2p1d, vanilla_channel, vanilla_2p1d or none
    #[arg(long)]
    pub attention: Option<String>,
    /// Q/K/V recipe for dep_mhsa: A, B, C or D
    #[arg(long)]
    pub variant: Option<String>,
    /// Position embedding: off, score or dual
    #[arg(long)]
    pub pos_embed: Option<String>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Divide every layer width by this factor
    #[arg(long)]
    pub width_div: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 747)]
        subjects: usize,
        #[arg(long, default_value_t = 0.5)]
        pos_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frame side length in pixels
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Window, crop and downsample a raw dataset
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        crop: usize,
        #[arg(long, default_value_t = 2)]
        factor: usize,
        #[arg(long, default_value_t = 50.0, allow_hyphen_values = true)]
        window_center: f64,
        #[arg(long, default_value_t = 200.0)]
        window_width: f64,
        /// Write frames as mtsv instead of pgm
        #[arg(long)]
        mtsv: bool,
    },
    /// Train a model and write its checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Print itemized parameter counts
    Params {
        #[command(flatten)]
        model: ModelArgs,
        /// Report the four ablation configurations instead
        #[arg(long)]
        ablation: bool,
    },
    /// Finite-difference gradient check of a registered op
    Gradcheck {
        /// Op name, or "all"
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Quick internal consistency checks
    Selftest,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// key = value file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// adam or sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Global gradient-norm limit, 0 disables clipping
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Subjects held out for the test split
    #[arg(long)]
    pub test_n: Option<usize>,
    /// Average frames down by this factor on load
    #[arg(long)]
    pub downsample: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// train, val, test or all
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Expected architecture; a checkpoint built differently is rejected
    #[command(flatten)]
    pub model: ModelArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Undefined(_) | Error::Io(_) => 3,
        Error::Checkpoint(_) => 4,
        Error::Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { out, subjects, pos_frac, seed, size } => commands::synth(&out, subjects, pos_frac, seed, size),
        Command::Preprocess { input, out, crop, factor, window_center, window_width, mtsv } => {
            commands::preprocess(&input, &out, crop, factor, window_center, window_width, mtsv)
        }
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Params { model, ablation } => commands::params(&model, ablation),
        Command::Gradcheck { op, trials, tolerance, seed } => commands::gradcheck(&op, trials, tolerance, seed),
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
