use std::path::PathBuf;

use thiserror::Error;

use crate::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("state error: {0}")]
    State(String),

    #[error("ordering error: expected task {expected}, got task {got}")]
    Ordering { expected: TaskId, got: TaskId },

    #[error("lookup error: unknown task {0}")]
    Lookup(TaskId),

    #[error("integrity error in `{field}`: {detail}")]
    Integrity { field: String, detail: String },

    #[error("schema error at line {line}: {detail} (field `{field}`)")]
    Schema {
        line: usize,
        field: String,
        detail: String,
    },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at row {row}, column {col}: {detail}")]
    Parse {
        row: usize,
        col: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Integrity {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
