use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("solver diverged at iteration {iteration}: non-finite value encountered (step size too large?)")]
    Diverged { iteration: usize },

    #[error("eigensolver did not converge: {0}")]
    NoConvergence(String),

    #[error("degenerate eigengap: {0}")]
    DegenerateEigengap(String),

    #[error("inconsistent data: {0}")]
    InconsistentData(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code: 1 io/parse, 2 usage or config, 3 divergence,
    /// 4 data inconsistency.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse(_) => 1,
            Error::InvalidArgument(_) | Error::DimensionMismatch(_) => 2,
            Error::Diverged { .. } | Error::NoConvergence(_) => 3,
            Error::DegenerateEigengap(_) => 2,
            Error::InconsistentData(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
