use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("token id {id} at position {pos} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: usize, pos: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("unknown head `{0}`")]
    UnknownHead(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("span ({start}, {end}) invalid for sequence of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },

    #[error("example `{id}`: {reason}")]
    InvalidExample { id: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("task mismatch: expected {expected}, found {found}")]
    TaskMismatch { expected: String, found: String },

    #[error("missing soft targets: {0}")]
    MissingSoftTargets(String),

    #[error("empty teacher list")]
    NoTeachers,

    #[error("gradient accumulator is empty")]
    EmptyAccumulator,

    #[error("invalid training setup: {0}")]
    Setup(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
