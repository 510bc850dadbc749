use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("degenerate input: {what} (row {index})")]
    DegenerateInput { what: String, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("oracle violation: {0}")]
    OracleViolation(String),

    #[error("stability violation: sub-batch {sub_batch} embeddings differ between passes (checksum {first:016x} vs {second:016x})")]
    StabilityViolation {
        sub_batch: usize,
        first: u64,
        second: u64,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing required key `{0}`")]
    MissingKey(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid(msg: impl Into<String>) -> LabError {
    LabError::InvalidArgument(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> LabError {
    LabError::Contract(msg.into())
}
