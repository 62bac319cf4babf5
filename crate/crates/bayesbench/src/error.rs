//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A file does not follow its declared binary format.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Two artifacts that must agree (shapes, counts, hashes) do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A non-finite value surfaced during numeric evaluation.
    #[error("numeric error in {context}: {reason}")]
    Numeric { context: String, reason: String },

    /// Training diverged; carries a description of the last finite state.
    #[error("training error: {reason} (last finite state: {last_finite})")]
    Training { reason: String, last_finite: String },

    /// A pipeline stage failed; the stage marker names the resume point.
    #[error("stage `{stage}` failed: {reason}")]
    Stage { stage: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn numeric(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Numeric { context: context.into(), reason: reason.into() }
    }
}
