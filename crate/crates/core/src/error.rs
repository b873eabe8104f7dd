use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("batch norm needs at least 2 rows in training mode, got {0}")]
    DegenerateBatch(usize),
    #[error("backward called without a recorded forward trace")]
    NoTrace,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index} out of range for {len} nodes")]
    Index { index: usize, len: usize },
    #[error("invalid state: {0}")]
    State(String),
    #[error("normal equations are rank deficient (pivot {pivot} at column {column}); use lambda > 0")]
    RankDeficient { column: usize, pivot: f64 },
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
