//! `oversmooth` command-line tool.
//!
//! Exit codes: 0 on success, 2 on usage or contract errors, 1 on internal
//! failures. Reports go to standard output or `--out`; diagnostics go to
//! standard error.

mod commands;
mod report;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] oversmooth::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_contract() => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "oversmooth", version, about = "Measure and reproduce over-smoothing in spectrogram prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed; falls back to OVERSMOOTH_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Log-mel spectrogram of a mono 16-bit WAV file.
    Mel(commands::MelArgs),
    /// Var_L of one spectrogram, SSIM between two.
    Metrics(commands::MetricsArgs),
    /// Per-phoneme value distributions over a corpus.
    Dist(commands::DistArgs),
    /// Synthetic one-to-many experiment.
    Toylab(commands::ToylabArgs),
    /// Train, sample from, or score a normalizing flow.
    Flow {
        #[command(subcommand)]
        action: commands::FlowAction,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mel(a) => commands::mel(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Dist(a) => commands::dist(a),
        Command::Toylab(a) => commands::toylab(a),
        Command::Flow { action } => commands::flow(action),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
