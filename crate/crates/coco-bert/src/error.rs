use thiserror::Error;

/// Crate-wide error type. Structural misuse of the tape (bad shapes wired
/// together) panics instead; everything that depends on runtime data - files,
/// configs, user-supplied dimensions, numerical blow-ups - comes back as one
/// of these.
#[derive(Debug, Error)]
pub enum CocoError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("dataset error at line {line}: {msg}")]
    Dataset { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite {term} loss at step {step}")]
    NonFinite { term: &'static str, step: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CocoError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CocoError {
    CocoError::Invalid(msg.into())
}
