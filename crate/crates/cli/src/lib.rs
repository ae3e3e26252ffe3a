//! Command-line harness around the `latentcrf` library: a TOML run
//! configuration, the training and evaluation workflow, numerical
//! self-checks and the subcommands that tie them to files on disk.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod workflow;

pub use commands::{execute, run, Cli, Command};
pub use config::RunConfig;
pub use error::{exit, CliError, CliResult};

/// Sizes the global worker pool from `LCRF_THREADS` when it is set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("LCRF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("LCRF_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(CliError::Config("LCRF_THREADS must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}
