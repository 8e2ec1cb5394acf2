//! `bsvie`: batch runs of the EBSVIE solvers, diagnostics and control checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::config::{Command, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    ChecksFailed(String),
    #[error("{0}")]
    Internal(String),
    #[error(transparent)]
    Core(#[from] bsvie_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        use bsvie_core::Error as E;
        match self {
            Self::Config(_) => "config",
            Self::NotConverged(_) => "non-convergence",
            Self::ChecksFailed(_) => "checks-failed",
            Self::Internal(_) => "internal",
            Self::Io(_) => "resource",
            Self::Core(e) => match e {
                E::Resource { .. } | E::Io(_) => "resource",
                E::Config(_)
                | E::InvalidArgument(_)
                | E::InvalidGrid(_)
                | E::UnknownControl(_)
                | E::MissingDerivatives(_)
                | E::GeneratorDependsOnY(_)
                | E::DerivativeCheck { .. } => "config",
                _ => "solver",
            },
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "config" => 2,
            "non-convergence" => 3,
            "resource" => 4,
            _ => 1,
        }
    }
}

/// Exit codes: 0 success, 1 failed checks or internal error, 2 configuration
/// error, 3 non-convergence under `--strict`, 4 resource error.
#[derive(Debug, Parser)]
#[command(name = "bsvie", version, about)]
struct Args {
    /// Command to run; defaults to `command` in the config file.
    #[arg(value_enum)]
    command: Option<Command>,
    /// TOML run configuration. Unknown keys are rejected.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `BSVIE_OUTPUT_DIR` and the config.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
    /// Treat solver non-convergence as an error (exit 3).
    #[arg(long)]
    strict: bool,
}

fn run(args: Args) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let command = match (args.command, cfg.command) {
        (Some(a), Some(b)) if a != b => {
            return Err(CliError::Config(format!(
                "command `{}` differs from the config's `{}`",
                a.name(),
                b.name()
            )))
        }
        (Some(c), _) | (None, Some(c)) => c,
        (None, None) => return Err(CliError::Config("no command given".into())),
    };
    let out_dir = args
        .output_dir
        .or_else(|| std::env::var_os("BSVIE_OUTPUT_DIR").map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("bsvie-out"));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| commands::execute(command, &cfg, &out_dir, args.strict))
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: category={} message={e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
