//! Command-line orchestration: configuration, experiments and artifact files.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use adaptqsd_core::Error;
use clap::{Parser, Subcommand};

pub use config::RunConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const HYPOTHESIS: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const MASS_EXTINCTION: i32 = 5;
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Hypothesis(String),
    Run(Error),
    Io(std::io::Error),
}

impl CliError {
    /// Errors raised while turning the config into model objects are config errors.
    pub fn from_setup(e: Error) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Hypothesis(_) => exit::HYPOTHESIS,
            CliError::Run(Error::MassExtinction { .. }) => exit::MASS_EXTINCTION,
            CliError::Run(Error::InvalidParam { .. } | Error::Unsupported(_)) => exit::CONFIG,
            CliError::Run(_) | CliError::Io(_) => exit::NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Hypothesis(m) => write!(f, "hypothesis violated: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "adaptqsd",
    version,
    about = "Quasi-stationary analysis of the lag/size adaptation model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config; keys missing from it take the shipped defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the model hypotheses.
    Validate,
    /// Simulate one trajectory from (x0, y0).
    Simulate,
    /// Fleming-Viot estimate of the QSD and the extinction rate.
    Fv,
    /// Survival-regression estimate of the extinction rate.
    Lambda,
    /// Grid estimate of eta and beta.
    Eta,
    /// Q-process paths started from beta.
    Qprocess,
    /// Finite-volume generator and its leading eigen-triple (d = 1).
    Oracle,
    /// Convergence curve, balance residual, truncation family and rate comparison.
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Fv => "fv",
            Command::Lambda => "lambda",
            Command::Eta => "eta",
            Command::Qprocess => "qprocess",
            Command::Oracle => "oracle",
            Command::Diagnose => "diagnose",
        }
    }
}

/// Parses the config, applies flags and runs the subcommand.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if cfg.threads > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    commands::dispatch(cli.command, &cfg, &cli.out)
}
