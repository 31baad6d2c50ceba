//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity appeared in an input or output.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("report error: {0}")]
    Report(String),

    /// Backward was requested without the state saved by forward.
    #[error("missing forward state: {0}")]
    MissingState(&'static str),

    /// Training produced a non-finite loss; a diagnostic snapshot was written.
    #[error("training aborted at step {step}: non-finite loss (snapshot at {snapshot:?})")]
    Diverged { step: u64, snapshot: Option<PathBuf> },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
