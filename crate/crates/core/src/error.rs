use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor had the wrong rank or extent along some axis.
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("{op}: invalid batch: {detail}")]
    InvalidBatch { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    Label {
        label: usize,
        classes: usize,
        row: usize,
    },

    #[error(transparent)]
    ModelLabel(#[from] crate::label::LabelError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: byte offset {offset}: {detail}")]
    Data {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: total {total}, terms {terms:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        total: f64,
        terms: [f64; 3],
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
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
