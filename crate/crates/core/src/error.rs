use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel or filter window {window} does not fit a {height}x{width} grid")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("site system matrix is not positive definite at site {site}")]
    SingularSystem { site: usize },

    #[error("no inference tape: the forward pass ran in inference mode")]
    TapeMissing,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss {loss} exceeds 10x running average {average}")]
    Diverged { step: usize, loss: f64, average: f64 },

    #[error("schedule handoff mismatch: {0}")]
    Handoff(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
