//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, CLI usage, or an infeasible search setup.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (datasets, checkpoints, genome files).
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("numeric divergence: loss is not finite at step {step}")]
    Divergence { step: u64 },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) => 2,
            Error::Divergence { .. } => 3,
        }
    }
}
