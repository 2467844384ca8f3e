use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(
        "non-finite loss {loss} at epoch {epoch}, batch {batch} (learning rate {learning_rate})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
        loss: f64,
    },

    #[error("dataset {dataset}: unknown raw label {label:?} at row {row}")]
    UnknownLabel {
        dataset: String,
        label: String,
        row: usize,
    },

    #[error("dataset {dataset}: missing column {column:?} in {path}")]
    MissingColumn {
        dataset: String,
        column: String,
        path: PathBuf,
    },

    #[error("dataset {dataset}: {detail}")]
    Dataset { dataset: String, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
