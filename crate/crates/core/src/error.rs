use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameter or scene/grid specification.
    #[error("config error: {0}")]
    Config(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes, frame sets or record layouts that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// A loss rank mining selection boundary moved under a finite-difference
    /// perturbation, so the central difference is not a valid oracle.
    #[error("boundary tie: {0}")]
    BoundaryTie(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("malformed data in {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command line: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Structural(_) | Error::Data { .. } | Error::Io { .. } => 3,
            Error::Domain(_) | Error::BoundaryTie(_) | Error::Divergence { .. } => 4,
        }
    }
}
