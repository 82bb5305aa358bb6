use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("gradient oracle: {0}")]
    Oracle(String),
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, msg: impl Into<String>) -> NumError {
    NumError::Dimension {
        op,
        msg: msg.into(),
    }
}
