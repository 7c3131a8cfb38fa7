//! Batch front end: scenario loading, subcommands, and result files.

pub mod commands;
pub mod emit;
pub mod scenario;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

pub use scenario::Scenario;

/// Failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Malformed input or configuration (exit 2).
    Validation(String),
    Core(zoomstab::Error),
    /// Output could not be written (exit 4).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Core(e) => match e {
                zoomstab::Error::Input(_) | zoomstab::Error::Config(_) => 2,
                zoomstab::Error::Structural(_) | zoomstab::Error::Unsupported(_) => 3,
                zoomstab::Error::Numeric(_) => 4,
            },
            CliError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "io",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "kind": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() } })
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<zoomstab::Error> for CliError {
    fn from(e: zoomstab::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Jsonl,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "zoomstab", version, about = "Fixed-rate zooming quantizer control of noisy linear systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the scenario trial count.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Per-step record format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Jsonl)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Controllability, observability and spectrum report.
    Check,
    /// Block observability decomposition and eigenspace assignment.
    Decompose,
    /// Run closed-loop trials and write per-step records and a summary.
    Simulate,
    /// Minimum, period-averaged and sufficient rates.
    Rate,
    /// Gaussian overflow bound against Monte Carlo.
    Tailbound,
    /// Run trials and report the stability diagnostics.
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Decompose => "decompose",
            Command::Simulate => "simulate",
            Command::Rate => "rate",
            Command::Tailbound => "tailbound",
            Command::Diagnose => "diagnose",
        }
    }
}

/// Load the scenario with flag overrides applied.
pub fn resolve_scenario(cli: &Cli) -> Result<Scenario, CliError> {
    let path = cli.scenario.as_ref().ok_or_else(|| CliError::Validation("--scenario <path> is required".into()))?;
    let mut sc = Scenario::load(path)?;
    if let Some(seed) = cli.seed {
        sc.seed = seed;
    }
    if let Some(t) = cli.trials {
        if t == 0 {
            return Err(CliError::Validation("--trials must be at least 1".into()));
        }
        sc.trials = t;
    }
    Ok(sc)
}

/// Run a parsed command line; the returned JSON goes to standard output.
pub fn run(cli: &Cli) -> Result<(serde_json::Value, i32), CliError> {
    let sc = resolve_scenario(cli)?;
    commands::dispatch(cli.command, &sc, cli.out.as_deref(), cli.format)
}
