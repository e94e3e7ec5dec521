use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("{0}")]
    Contract(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
