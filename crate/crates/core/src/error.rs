//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("oracle role misuse: {0}")]
    RoleMisuse(String),

    #[error("stale generation record: {0}")]
    StaleRecord(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("sequence too long: {0}")]
    SequenceTooLong(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-deterministic function: {0}")]
    NonDeterministic(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing record id {0:?} in toxicity map")]
    MissingId(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 1 for validation-class errors caught before or while
    /// checking inputs, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Index(_)
            | Error::UnknownWord(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::Checkpoint(_)
            | Error::SequenceTooLong(_) => 1,
            _ => 2,
        }
    }
}
