//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Error`]. The CLI maps
//! errors to process exit codes: I/O and file-format problems exit with 2,
//! everything else (shape, configuration, numeric failures) with 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform; the message names the operation and
    /// both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),

    #[error("loss tensor was not produced by this tape")]
    DetachedTensor,

    #[error("mask row {row} has no valid positions")]
    EmptyMaskRow { row: usize },

    #[error("head count {heads} does not divide d_model {d_model}")]
    HeadDivisibility { d_model: usize, heads: usize },

    #[error("sequence length {len} exceeds the learned position table ({max_len} rows)")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("{path}:{line}: cannot parse line")]
    ParseError { path: String, line: usize },

    #[error("{path}:{line}: unknown label {label:?}")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },

    #[error("{path}:{line}: empty sentence")]
    EmptySentence { path: String, line: usize },

    #[error("embedding dimension mismatch: expected {expected}, file has {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("{path}:{line}: malformed embedding line")]
    MalformedLine { path: String, line: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("optimizer state shape mismatch for {path}: state {state} vs parameter {param}")]
    StateShapeMismatch {
        path: String,
        state: usize,
        param: usize,
    },

    #[error("non-finite loss {value} at batch {batch}")]
    NonFiniteLoss { batch: usize, value: f64 },

    #[error("model requires an embedding matrix but none was provided")]
    MissingEmbeddings,

    #[error("checkpoint file is corrupt: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("cannot parse {what}: {detail}")]
    BadConfig { what: String, detail: String },
}

impl Error {
    /// Process exit code the CLI uses for this error: 2 for I/O and
    /// file-format failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::ParseError { .. }
            | Error::UnknownLabel { .. }
            | Error::EmptySentence { .. }
            | Error::DimMismatch { .. }
            | Error::MalformedLine { .. }
            | Error::BadCheckpoint(_)
            | Error::BadConfig { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
