use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes, names or parameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A structural guarantee (replication, family membership, pairing) was broken.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A state machine transition was requested from the wrong state.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Pooled output variance is zero, so no index can be formed.
    #[error("degenerate model: pooled output variance is zero")]
    DegenerateModel,

    #[error("evaluation failed{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Evaluation { row: Option<usize>, message: String },

    #[error("protocol error: expected {expected} output rows, got {actual}")]
    Protocol { expected: usize, actual: usize },

    #[error("campaign directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

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

    pub(crate) fn eval(row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Evaluation {
            row,
            message: message.into(),
        }
    }
}
