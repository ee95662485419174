use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or argument is outside its valid domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("graph construction failed: {0}")]
    Construction(String),

    #[error("cannot normalize reservoir: raw spectral radius is {radius:e}")]
    Normalization { radius: f64 },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Dimension or length mismatch between arguments.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("degenerate value range: {0}")]
    DegenerateRange(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
