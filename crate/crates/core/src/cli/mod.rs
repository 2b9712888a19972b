//! Command-line interface.

mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qrlaplace::curvature::CurvatureMethod;
use qrlaplace::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter { .. } | Error::Config(_) | Error::Unsupported(_) => CliError::Config(e.to_string()),
            Error::DimensionMismatch { .. } | Error::Domain(_) => CliError::Data(e.to_string()),
            Error::SingularCovariance { .. }
            | Error::ModeNotConverged { .. }
            | Error::DegenerateCurvature(_)
            | Error::NonPositiveDensity(_)
            | Error::NonFinite(_) => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CurvatureArg {
    Fisher,
    Tkc,
}

impl From<CurvatureArg> for CurvatureMethod {
    fn from(c: CurvatureArg) -> Self {
        match c {
            CurvatureArg::Fisher => CurvatureMethod::Fisher,
            CurvatureArg::Tkc => CurvatureMethod::Tkc,
        }
    }
}

/// Laplace-approximated Bayesian quantile regression for latent Gaussian
/// models.
#[derive(Debug, Parser)]
#[command(name = "qrlaplace", version)]
pub struct Cli {
    /// Worker threads for replicated experiments (default: available
    /// parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Leave out timestamps and wall-clock times so repeated runs produce
    /// identical files.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides shared by several commands.
#[derive(Debug, Clone, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub curvature: Option<CurvatureArg>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated dataset: data.csv, truth.csv and metadata.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fit a model by empirical Bayes and write the result as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict quantiles and latent standard deviations at new points.
    Predict {
        /// Result file written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a replicated simulation experiment and write the report CSV.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare Laplace log-marginal likelihoods with quadrature.
    MllCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Empirical coverage of naive and sandwich intervals.
    Coverage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
