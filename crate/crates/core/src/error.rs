use thiserror::Error;

use crate::vocab::TokenId;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("token-out-of-vocab: id {token} (vocab size {size})")]
    TokenOutOfVocab { token: TokenId, size: usize },

    #[error("numeric-overflow at {position}")]
    NumericOverflow { position: String },

    #[error("stale-group: {0}")]
    StaleGroup(String),

    #[error("logprob-misalign: expected {expected} entries, got {got}")]
    LogprobMisalign { expected: usize, got: usize },

    #[error("uniform-group: all responses share the same reward")]
    UniformGroup,

    #[error("no-reference: group has no correct response")]
    NoReference,

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
