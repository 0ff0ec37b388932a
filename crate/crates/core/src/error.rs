//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes are incompatible for the requested op.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape argument is invalid on its own (bad axis, bad slice range, ...).
    #[error("{op}: invalid shape argument: {msg} (shape {shape:?})")]
    BadShape {
        op: &'static str,
        msg: String,
        shape: Vec<usize>,
    },

    #[error("{0}")]
    InvalidSpec(String),

    #[error("parameter group '{0}' not found")]
    UnknownGroup(String),

    #[error("parameter group '{0}' registered twice")]
    DuplicateGroup(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token id {id} out of range (vocab {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("zero-norm embedding at row {0}; encoder output is degenerate")]
    ZeroNormEmbedding(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    InvalidConfig(String),

    #[error("refusing to clobber {0} (pass --force to overwrite)")]
    WouldClobber(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {msg}")]
    MalformedFile { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
