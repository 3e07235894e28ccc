//! Command-line front end for penalized multivariate mixed-effects models.
//!
//! Exit codes: 0 success, 1 validation error, 2 non-convergence, 3 I/O error.

mod commands;
mod config;
mod io;

use std::path::{Path, PathBuf};
use std::ffi::OsString;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Core(penmlmm::Error),
    Io { path: PathBuf, source: std::io::Error },
    Config(String),
    NotConverged(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(penmlmm::Error::Io { .. }) | CliError::Io { .. } => 3,
            CliError::Core(penmlmm::Error::Divergence { .. }) | CliError::NotConverged(_) => 2,
            CliError::Core(_) | CliError::Config(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "I/O error on {}: {source}", path.display()),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::NotConverged(m) => write!(f, "not converged: {m}"),
        }
    }
}

impl From<penmlmm::Error> for CliError {
    fn from(e: penmlmm::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "penmlmm", version, about = "Penalized multivariate linear mixed-effects models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for simulation, CV folds and replication (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (overrides `threads`; default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a simulated dataset with its true parameters and split.
    Simulate,
    /// Fit one model at a fixed lambda.
    Fit,
    /// Choose lambda by k-fold cross-validation and refit on all data.
    Cv,
    /// Predict responses for new rows from a saved fit.
    Predict,
    /// Score a saved fit against truth and/or a test dataset.
    Evaluate,
    /// Monte Carlo comparison of the six model configurations.
    Replicate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(out) = cli.out {
        cfg.output_dir = Some(out);
    }
    if let Some(t) = cfg.threads {
        if t == 0 {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        // a pool can only be installed once per process; later calls are no-ops
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let hash = cfg.hash();
    let ctx = commands::Context { cfg, out, quiet: cli.quiet, hash };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::Cv => commands::cv(&ctx),
        Command::Predict => commands::predict(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Replicate => commands::replicate(&ctx),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
