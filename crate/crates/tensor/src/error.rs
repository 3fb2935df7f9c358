use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on {axis}: expected {expected:?}, got {got:?}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("data of length {len} cannot fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{op}: no valid elements")]
    NoValidElements { op: &'static str },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        TensorError::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidArgument { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
