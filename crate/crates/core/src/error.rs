use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the kernels in this crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    Dimension {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("index {index:?} out of range for extents {extents:?}")]
    Index {
        index: Vec<usize>,
        extents: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value while evaluating coordinate {coordinate} of `{group}`")]
    Numeric { group: String, coordinate: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(expected: &[usize], actual: &[usize]) -> Self {
        Error::Dimension {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
