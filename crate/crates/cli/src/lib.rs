//! Command-line front end: training runs, credit analysis, sweeps.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    /// Bad flags or an invalid config.
    pub const CONFIG: i32 = 2;
    /// The divergence guard tripped.
    pub const DIVERGED: i32 = 3;
    pub const IO: i32 = 4;
    /// A game file, trajectory log, or checkpoint failed to parse.
    pub const MALFORMED: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn malformed(path: &Path, message: impl ToString) -> Self {
        CliError::Malformed {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Diverged(_) => exit::DIVERGED,
            CliError::Io { .. } => exit::IO,
            CliError::Malformed { .. } => exit::MALFORMED,
            CliError::Internal(_) => exit::INTERNAL,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sharp",
    version,
    about = "Shapley-credit multi-agent policy optimization on a synthetic tool world"
)]
pub struct Cli {
    /// Worker threads for rollouts and replays (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write its artifacts.
    Train(RunArgs),
    /// Exact Shapley values, ablation credit and axiom residuals of a game file.
    Shapley { game_file: PathBuf },
    /// Coordination report for a trajectory log.
    Analyze {
        log: PathBuf,
        #[arg(long, default_value = "exact")]
        estimator: String,
        /// Report file (default: next to the log).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Second log to compare against (reported as log − baseline).
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train once per (p, seed) and tabulate cost against final success.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated sparsification probabilities.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        p: Vec<f64>,
        /// Number of seeds per p, starting at the run seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Evaluation-only rollouts of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides eval.episodes from the config.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Print the default config.
    Config,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides SHARP_SEED and train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides train.estimator.
    #[arg(long)]
    pub estimator: Option<String>,
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return exit::CONFIG;
        }
        pool = pool.num_threads(jobs);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::INTERNAL;
        }
    };
    match pool.install(|| commands::dispatch(cli.command)) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
