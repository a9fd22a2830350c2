use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: span {span_id} out of bounds (start {start}, len {len}, {tokens} tokens)")]
    SpanOutOfBounds {
        line: usize,
        span_id: String,
        start: usize,
        len: usize,
        tokens: usize,
    },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("unsupported schema version `{found}` (expected `{expected}`)")]
    SchemaVersion { found: String, expected: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),

    #[error("span `{0}` has no {1}")]
    MissingLabel(String, &'static str),

    #[error("unknown span `{0}`")]
    UnknownSpan(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: slot {slot_loss}, weak {weak_loss}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        slot_loss: f64,
        weak_loss: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
