use thiserror::Error;

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),
}

impl DiffError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
