use thiserror::Error;

pub type Result<T> = std::result::Result<T, AdError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("non-finite input value at index {index}")]
    NonFiniteInput { index: usize },

    #[error("{op} produced a non-finite value (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("grad needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("node {0} is no longer on the tape (truncated)")]
    Truncated(usize),

    #[error("values belong to different tapes")]
    TapeMismatch,

    #[error("replay of node {node} ({op}) did not reproduce the recorded value")]
    ReplayMismatch { op: &'static str, node: usize },
}
