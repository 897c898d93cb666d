//! `membp` command-line tools. Every command writes its artifacts plus a
//! `<out>.manifest.json` beside them; identical manifests reproduce
//! byte-identical outputs.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage or config error.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use membp_core::approximator::{ActivationKind, ObjectiveMode};
use membp_core::memledger::Scheme;
use membp_core::tape::{ActivationChoice, NormChoice};

pub use commands::{fit, gradcheck, memreport, train, EVAL_SIZE};
pub use manifest::{manifest_path, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "membp", version, about = "Memory-efficient backpropagation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a ReLU-combination approximator by simulated annealing.
    Fit(FitArgs),
    /// Validate analytic gradients of every node kind against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a model config and write its loss trace, ledger and parameters.
    Train(TrainArgs),
    /// Analytic activation-memory report of one transformer block.
    Memreport(MemreportArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub activation: ActivationKind,
    #[arg(long, default_value_t = 2)]
    pub bits: u32,
    #[arg(long, default_value = "primitive")]
    pub mode: ObjectiveMode,
    /// Tail mass left outside the integration interval.
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's activation.
    #[arg(long)]
    pub activation: Option<ActivationChoice>,
    /// Overrides the config's norm.
    #[arg(long)]
    pub norm: Option<NormChoice>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides the config's seed (weights and data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss-trace CSV; the ledger and parameter dump are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MemreportArgs {
    /// `vit-b`, `llama-13b` or a block-spec JSON file.
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value = "baseline")]
    pub scheme: Scheme,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or malformed inputs, unwritable outputs.
    Usage(String),
    /// An invariant or check failed.
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Validation(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Validation(m) => f.write_str(m),
        }
    }
}

impl From<membp_core::Error> for CliError {
    fn from(e: membp_core::Error) -> Self {
        match e {
            membp_core::Error::Config(_) => Self::Usage(e.to_string()),
            other => Self::Validation(other.to_string()),
        }
    }
}

/// Runs one command and returns its standard output.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train(a),
        Command::Memreport(a) => memreport(a),
    }
}

/// Parses `args` (program name first), runs the command, prints its output
/// and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(stdout) => {
            print!("{stdout}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
