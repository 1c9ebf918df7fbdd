use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} needs {expected} values, got {actual}")]
    InvalidTensor {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("invalid {what}: {reason}")]
    InvalidInput { what: &'static str, reason: String },

    #[error("unknown op `{0}`")]
    UnknownOp(String),

    #[error("{op} expects {expected} input(s), got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("input of length {len} is shorter than the receptive field {field} of {what}")]
    InputTooShort {
        what: &'static str,
        len: usize,
        field: usize,
    },

    #[error("no CTC alignment of {target_len} labels ({repeats} repeats) fits in {frames} frames")]
    InfeasibleTarget {
        frames: usize,
        target_len: usize,
        repeats: usize,
    },

    #[error("invalid token sequence: {0}")]
    InvalidTokens(String),

    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),

    #[error("empty reference set")]
    EmptyReference,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
