use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{what} is not available for variant {variant}")]
    WrongVariant {
        what: &'static str,
        variant: &'static str,
    },
    #[error("division by zero: {0}")]
    ZeroDivision(&'static str),
    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_mismatch(
    expected: impl core::fmt::Debug,
    found: impl core::fmt::Debug,
) -> Error {
    Error::ShapeMismatch {
        expected: alloc::format!("{expected:?}"),
        found: alloc::format!("{found:?}"),
    }
}
