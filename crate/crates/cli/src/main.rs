//! `natcf`: generate toy data, fit models, run counterfactual queries,
//! benchmarks, ε sweeps and the solver-vs-oracle check.
//!
//! Exit status: 0 success, 1 infeasible query or failed verification,
//! 2 usage or config error, 3 data error.

mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

/// What a successful command reports besides its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Infeasible natural query, or a verification below threshold.
    Negative,
}

#[derive(Parser)]
#[command(name = "natcf", version, about = "Natural and non-backtracking counterfactuals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train and test CSVs from a toy or an SCM file.
    Generate(GenerateArgs),
    /// Fit location-scale mechanisms to a dataset and write an SCM file.
    Fit(FitArgs),
    /// Answer one counterfactual query.
    Query(QueryArgs),
    /// MAE of natural and non-backtracking counterfactuals under a fitted model.
    Bench(BenchArgs),
    /// Repeat the benchmark over several ε values.
    Ablate(AblateArgs),
    /// Compare the solver against the grid oracle.
    Verify(VerifyArgs),
}

#[derive(Args, Clone, Default)]
pub struct Source {
    /// Experiment file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Toy model 1-4.
    #[arg(long)]
    pub toy: Option<usize>,
    /// SCM spec file.
    #[arg(long)]
    pub scm: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
pub struct FioArgs {
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub w_eps: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// adaptive_moment or plain_gd
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub restarts: Option<u32>,
    /// Seed of the restart jitter.
    #[arg(long)]
    pub fio_seed: Option<u64>,
    #[arg(long)]
    pub change_tol: Option<f64>,
    #[arg(long)]
    pub inversion_tol: Option<f64>,
    /// endogenous_l1 or mechanism_cdf
    #[arg(long)]
    pub distance: Option<String>,
    /// conditional_cdf, exogenous_cdf or entropy_normalized
    #[arg(long)]
    pub measure: Option<String>,
    /// noise or cdf
    #[arg(long)]
    pub penalty_space: Option<String>,
}

#[derive(Args, Clone, Default)]
pub struct FitFlags {
    /// Total degree of the polynomial basis.
    #[arg(long)]
    pub degree: Option<u32>,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Frequencies of extra sin/cos features, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sin_freq: Option<Vec<f64>>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub n: Option<usize>,
    /// Train path, optionally followed by a test path.
    #[arg(long, value_delimiter = ',')]
    pub out: Option<Vec<PathBuf>>,
}

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub fit: FitFlags,
    /// Training CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output SCM spec file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub fio: FioArgs,
    /// CSV with a header and one row; missing columns are completed by
    /// rejection sampling.
    #[arg(long)]
    pub evidence: Option<PathBuf>,
    /// TARGET=VALUE
    #[arg(long)]
    pub change: Option<String>,
    /// natural or nonbacktracking
    #[arg(long)]
    pub mode: Option<String>,
    /// Standardization source when the SCM file has none.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evidence band for partial rows, in standard deviations.
    #[arg(long)]
    pub band: Option<f64>,
    /// text or json
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub fio: FioArgs,
    #[command(flatten)]
    pub fit: FitFlags,
    /// Rows in each of train and test.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub outcomes: Option<Vec<String>>,
    /// text or json
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub bench: BenchArgs,
    #[arg(long, value_delimiter = ',')]
    pub eps_list: Option<Vec<f64>>,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub fio: FioArgs,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub target: Option<String>,
    /// Grid points per axis (odd).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// text or json
    #[arg(long)]
    pub format: Option<String>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("NATCF_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("NATCF_THREADS must be a count, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = init_threads().and_then(|()| match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Query(a) => commands::query(a),
        Command::Bench(a) => commands::bench(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Verify(a) => commands::verify(a),
    });
    match run {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Negative) => ExitCode::from(1),
        Err(e) => {
            eprintln!("natcf: {e}");
            ExitCode::from(e.code())
        }
    }
}
