use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: run `{command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error(transparent)]
    Core(#[from] latentcrf::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Process exit codes by error category.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const INVARIANT: i32 = 4;
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            exit::CONFIG => "config",
            exit::INVARIANT => "invariant",
            _ => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        use latentcrf::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(
                E::ShapeMismatch(_)
                | E::InvalidArgument(_)
                | E::WindowTooLarge { .. }
                | E::SingularSystem { .. }
                | E::NonFinite(_)
                | E::Diverged { .. }
                | E::Handoff(_),
            ) => exit::INVARIANT,
            _ => exit::OTHER,
        }
    }
}
