//! `mdpde`: fit, simulate, sweep and diagnose from the command line.
//!
//! Exit codes: 0 success, 1 output I/O failure, 2 configuration or parse
//! error, 3 nonconvergence, 4 numerical failure.

mod commands;
mod config;
mod input;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdpde::MdpdeError;

use config::CommonArgs;

#[derive(Debug, Parser)]
#[command(name = "mdpde", version, about = "Minimum density power divergence estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one α to a data file.
    Fit(CommonArgs),
    /// Run a Monte Carlo consistency or normality study.
    Simulate(CommonArgs),
    /// Fit along an α grid, or tabulate efficiency when no data is given.
    Sweep(CommonArgs),
    /// Check the regularity conditions at a parameter point.
    Diagnose(CommonArgs),
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Parse(String),
    Io(String),
    Core(MdpdeError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Parse(m) => write!(f, "parse error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<MdpdeError> for CliError {
    fn from(e: MdpdeError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) | CliError::Parse(_) => 2,
            CliError::Core(e) => match e {
                MdpdeError::Domain(_) | MdpdeError::Config(_) | MdpdeError::InsufficientData { .. } => 2,
                MdpdeError::NonConvergence { .. } => 3,
                MdpdeError::Boundary(_)
                | MdpdeError::Numerical { .. }
                | MdpdeError::IllConditioned { .. }
                | MdpdeError::Study { .. } => 4,
            },
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MDPDE_THREADS") else {
        return Ok(());
    };
    let threads: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("MDPDE_THREADS: not a thread count: {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("MDPDE_THREADS: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = configure_threads().and_then(|()| match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Diagnose(a) => commands::diagnose(a),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mdpde: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
