//! Command-line front end for spatially regularized spectral unmixing.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 solver hit
//! the iteration cap without converging (outputs are still written).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "sspm", version, about = "Spatial-spectral partial volume compartment mapping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a dictionary from a kernel/schedule/grid description.
    MakeDict(MakeDictArgs),
    /// Generate a synthetic phantom and its measurement stack.
    Phantom(PhantomArgs),
    /// Estimate the spectroscopic image from measurements.
    Solve(SolveArgs),
    /// Run LADMM and ADMM on the same problem against an exact-dictionary
    /// reference, emitting a joint convergence CSV.
    Compare(CompareArgs),
    /// Integrate spectral index ranges into spatial component maps.
    Maps(MapsArgs),
    /// Probe a small patch to pick the penalty parameter beta.
    TuneBeta(TuneBetaArgs),
}

#[derive(Debug, Args)]
pub struct MakeDictArgs {
    /// JSON description: {"kernel", "schedule", "grid"}.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Dictionary array file (with .meta.json sidecar).
    #[arg(long)]
    pub dict: PathBuf,
    /// Phantom description JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by every subcommand that assembles a Problem.
#[derive(Debug, Args)]
pub struct ProblemArgs {
    /// Dictionary array file (with .meta.json sidecar).
    #[arg(long)]
    pub dict: PathBuf,
    /// Measurement stack (P x N array file).
    #[arg(long)]
    pub data: PathBuf,
    /// 0/1 mask array file.
    #[arg(long)]
    pub mask: PathBuf,
    /// Spatial regularization weight.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Penalty parameter (default: sigma_1^2 / 10).
    #[arg(long)]
    pub beta: Option<f64>,
    /// LADMM step parameter (default: 0.75 lambda ||D^T D|| + 1e-10).
    #[arg(long)]
    pub xi_p: Option<f64>,
    /// Relative Frobenius tolerance for dictionary truncation.
    #[arg(long, default_value_t = sspm_core::DEFAULT_RANK_TOLERANCE)]
    pub rank_tol: f64,
    /// Keep every numerically nonzero singular value (disables truncation).
    #[arg(long)]
    pub exact_k: bool,
    #[arg(long, default_value_t = 20_000)]
    pub max_iters: usize,
    /// Relative-change stopping tolerance.
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    /// Split-residual stopping tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub split_tol: f64,
    /// Iterations between trace samples.
    #[arg(long, default_value_t = 10)]
    pub trace_every: usize,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    Ladmm,
    Admm,
    Nnls,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    pub algorithm: Algorithm,
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Voxelwise Tikhonov weight (NNLS only).
    #[arg(long, default_value_t = 0.0)]
    pub tikhonov: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Iteration cap for the exact-dictionary reference run.
    #[arg(long, default_value_t = 20_000)]
    pub ref_max_iters: usize,
    /// Relative-change tolerance for the reference run.
    #[arg(long, default_value_t = 1e-9)]
    pub ref_tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MapsArgs {
    /// Spectroscopic image (Q x N array file).
    #[arg(long)]
    pub image: PathBuf,
    /// Mask that defined the voxel ordering.
    #[arg(long)]
    pub mask: PathBuf,
    /// Comma-separated half-open spectral ranges, e.g. "0:16,16:32".
    #[arg(long)]
    pub regions: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneBetaArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Patch origin, comma-separated lattice coordinates.
    #[arg(long)]
    pub patch_origin: String,
    /// Patch shape, comma-separated extents.
    #[arg(long, default_value = "3,3")]
    pub patch_shape: String,
    /// Comma-separated candidate beta values.
    #[arg(long)]
    pub candidates: String,
    #[arg(long, default_value_t = 200)]
    pub probe_iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Errors mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(sspm_core::Error),
}

impl From<sspm_core::Error> for CliError {
    fn from(e: sspm_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
