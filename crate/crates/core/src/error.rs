use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("sequence has no content positions")]
    NoContent,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("block-coordinate violation: {0}")]
    BlockViolation(String),

    #[error("checkpoint schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("malformed input {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Short machine-readable kind, used by the CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCorpus => "empty_corpus",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidSequence(_) => "invalid_sequence",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::EmptyBatch => "empty_batch",
            Error::NoContent => "no_content",
            Error::LengthMismatch(_) => "length_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged(_) => "diverged",
            Error::BlockViolation(_) => "block_violation",
            Error::SchemaMismatch { .. } => "schema_mismatch",
            Error::Malformed { .. } => "malformed_input",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Config(_) => "config",
        }
    }
}
