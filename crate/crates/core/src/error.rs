use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum SqError {
    /// A parameter is outside its valid domain (bit-width, sparsity, alpha, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Shapes, masks or encoded layouts violate a structural invariant.
    #[error("structural error: {0}")]
    Structure(String),

    /// Input data contains NaN or infinite values.
    #[error("corrupt input: {0}")]
    CorruptInput(String),

    /// A numerical routine failed (e.g. factorization of a non-PD matrix).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A container could not be parsed.
    #[error("parse error in {section}: {message}")]
    Parse { section: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("report error: {0}")]
    Report(String),
}

impl SqError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        SqError::Param(msg.into())
    }

    pub(crate) fn structure(msg: impl Into<String>) -> Self {
        SqError::Structure(msg.into())
    }

    pub(crate) fn parse(section: impl Into<String>, message: impl Into<String>) -> Self {
        SqError::Parse {
            section: section.into(),
            message: message.into(),
        }
    }
}

impl From<csv::Error> for SqError {
    fn from(e: csv::Error) -> Self {
        SqError::Report(e.to_string())
    }
}

impl From<serde_json::Error> for SqError {
    fn from(e: serde_json::Error) -> Self {
        SqError::Report(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SqError>;
