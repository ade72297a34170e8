use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty text")]
    EmptyText,
    #[error("unknown label '{0}'")]
    UnknownLabel(String),
    #[error("invalid token id {0}")]
    InvalidTokenId(u32),
    #[error("{message} at line {line}")]
    Jsonl { line: usize, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Truncation { len: usize, max_len: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("divergence: non-finite value in '{0}'")]
    Divergence(String),
    #[error("step {t} out of range 0..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("{steps} steps cannot be split into {groups} equal groups")]
    NonDivisibleGroups { steps: usize, groups: usize },
    #[error("group index {index} out of range 1..={groups}")]
    GroupOutOfRange { index: usize, groups: usize },
    #[error("zero-norm representation at index {0}")]
    ZeroNorm(usize),
    #[error("dataset needs at least two classes, found {0}")]
    SingleClass(usize),
    #[error("class '{0}' has no originals to amplify")]
    EmptyClass(String),
    #[error("split: {0}")]
    Split(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{stage} checkpoint not found ({path})")]
    MissingStage { stage: &'static str, path: PathBuf },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Usage/config errors exit with 1, everything else with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
