use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid value in column `{column}`: {reason}")]
    Value { column: String, reason: String },

    #[error("{path}: row {row}: {reason}")]
    Parse {
        path: String,
        row: usize,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss `{loss}` at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        loss: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn value(column: &str, reason: impl Into<String>) -> Self {
        Error::Value {
            column: column.to_string(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (config, schema, data files)
    /// as opposed to failures during computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Value { .. }
                | Error::Parse { .. }
                | Error::InvalidArgument(_)
                | Error::Checkpoint(_)
                | Error::Io { .. }
                | Error::Csv(_)
        )
    }
}
