use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("array of shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("{op}: invalid argument: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
}

pub type Result<T> = std::result::Result<T, AdError>;
