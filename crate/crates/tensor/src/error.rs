use thiserror::Error;

/// Failure modes of tape operations. Anything numeric that goes wrong is an
/// error, never a silent NaN: every op checks its output for finiteness.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
}

impl TensorError {
    /// Shape-mismatch error; public so ops built on `custom_op` can report
    /// failures uniformly.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid { op, msg: msg.into() }
    }
}
