//! `nlunet`: phantom generation, training, inference, evaluation, gradient
//! checks, ablations, sweeps and parameter counts.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numeric failure (non-finite values, failed gradient check). Failures
//! print one line `error[<code>]: <detail>` to stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nlunet::{ErrorClass, ModelId};

#[derive(Parser, Debug)]
#[command(name = "nlunet", version, about = "Non-local U-Net for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that runs an experiment.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; takes precedence over the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory of the run directory.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct Pair {
    /// Intensity volume stem (`<stem>.hdr` + `<stem>.raw`).
    #[arg(long, value_name = "STEM")]
    pub image: PathBuf,
    /// Label volume stem.
    #[arg(long, value_name = "STEM")]
    pub labels: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TestPair {
    /// Held-out intensity volume stem.
    #[arg(long, value_name = "STEM")]
    pub test_image: PathBuf,
    /// Held-out label volume stem.
    #[arg(long, value_name = "STEM")]
    pub test_labels: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic labeled phantom (`image` and `labels` stems).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Extent: one value for a cube or D,H,W.
        #[arg(long, default_value = "64")]
        dims: String,
        /// Noise standard deviation relative to the class contrast.
        #[arg(long, default_value_t = nlunet::data::DEFAULT_NOISE)]
        noise: f64,
    },
    /// Train a network; writes the checkpoint `model` and `loss.tsv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Pair,
        /// Held-out intensity volume for periodic validation.
        #[arg(long, value_name = "STEM", requires = "val_labels")]
        val_image: Option<PathBuf>,
        /// Held-out label volume.
        #[arg(long, value_name = "STEM", requires = "val_image")]
        val_labels: Option<PathBuf>,
    },
    /// Sliding-window prediction; writes `probs` and `labels` volumes.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem written by `train`.
        #[arg(long, value_name = "STEM")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "STEM")]
        image: PathBuf,
        /// Window step; defaults to val_overlap_step.
        #[arg(long)]
        overlap_step: Option<usize>,
    },
    /// Score a predicted label volume against the ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Predicted label volume stem.
        #[arg(long, value_name = "STEM")]
        pred: PathBuf,
        /// Ground-truth label volume stem.
        #[arg(long, value_name = "STEM")]
        truth: PathBuf,
    },
    /// Finite-difference gradient checks of every op, block and the network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Train Model1-Model5 and the full network; tabulate held-out scores.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Pair,
        #[command(flatten)]
        test: TestPair,
        /// Window step for scoring.
        #[arg(long)]
        overlap_step: Option<usize>,
    },
    /// Accuracy against the window step or the patch size.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Pair,
        #[command(flatten)]
        test: TestPair,
        /// overlap or patch_size.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Trained network for the overlap axis; trains one when absent.
        #[arg(long, value_name = "STEM")]
        checkpoint: Option<PathBuf>,
        /// Window step used on the patch-size axis.
        #[arg(long)]
        overlap_step: Option<usize>,
    },
    /// Trainable parameter count of one variant, or a table of all of them.
    Params {
        /// Flat key=value config file.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Override one config key; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// 1-5 or full; prints a single integer.
        #[arg(long)]
        model: Option<ModelId>,
        #[arg(long)]
        base_width: Option<usize>,
    },
}

/// A failure reported on stderr and mapped to an exit code.
#[derive(Debug)]
pub struct Failure {
    pub exit: u8,
    pub code: &'static str,
    pub detail: String,
}

impl From<nlunet::Error> for Failure {
    fn from(e: nlunet::Error) -> Self {
        let exit = match e.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        };
        Failure {
            exit,
            code: e.code(),
            detail: e.to_string(),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, one_line(&f.detail));
            ExitCode::from(f.exit)
        }
    }
}
