use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("backward: loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: row {row}, column `{column}`: {detail}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: String,
        detail: String,
    },

    #[error("attribute `{attribute}` has no frequency entry for category `{category}`")]
    UnseenCategory { attribute: String, category: String },

    #[error("re-weighting cell (group {group}, label {label}) is empty")]
    EmptyCell { group: usize, label: u8 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} ({context})")]
    NonFinite {
        context: String,
        epoch: usize,
        batch: usize,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("method `{method}`: {source}")]
    Method {
        method: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    CsvFormat(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
