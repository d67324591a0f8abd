use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("token id {id} out of range for a vocabulary of {size} tokens")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("no multi-solution problem found after {0} attempts")]
    Unsatisfiable(usize),
    #[error("terminal space exceeds {limit} sequences")]
    SpaceTooLarge { limit: usize },
    #[error("trajectory inconsistent with problem: {0}")]
    InconsistentTrajectory(String),
    #[error("primitive `{0}` has no gradient")]
    UnsupportedPrimitive(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reward must be strictly positive, got {0}")]
    NonPositiveReward(f64),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("k = {k} exceeds the {len} samples available")]
    KTooLarge { k: usize, len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Problems with a run configuration, reported with exit code 2.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{name}` out of range: {message}")]
    Range { name: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, Error>;
