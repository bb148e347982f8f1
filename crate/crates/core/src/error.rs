use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis `{axis}` (expected {expected}, got {got})")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("training aborted at epoch {epoch}: non-finite values first appeared in {location}")]
    TrainingAborted { epoch: usize, location: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
