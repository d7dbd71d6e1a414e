use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GuimError>;

#[derive(Debug, Error)]
pub enum GuimError {
    #[error("interactions out of order at index {index}: {prev} > {next}")]
    Ordering { index: usize, prev: i64, next: i64 },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("lookup out of range: {table} index {index} >= {size}")]
    Lookup {
        table: &'static str,
        index: usize,
        size: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("cosine of a zero-norm vector")]
    ZeroNorm,

    #[error("mixture weights must be nonnegative and sum to 1 (sum = {0})")]
    WeightConstraint(f64),

    #[error("in-batch negative sampling needs at least 2 sequences, got {0}")]
    InsufficientNegatives(usize),

    #[error("no foreign item occurrence differs from the positive {0}")]
    NegativeExhaustion(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty index")]
    EmptyIndex,

    #[error("M = {m} exceeds index size {size}")]
    TooManyResults { m: usize, size: usize },

    #[error("no eligible users for protocol {0}")]
    NoEligibleUsers(String),

    #[error("training labels contain a single class")]
    SingleClass,

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GuimError {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GuimError::File {
            path: path.into(),
            source,
        }
    }
}
