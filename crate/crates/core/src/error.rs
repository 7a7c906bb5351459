use std::path::PathBuf;

/// Errors raised anywhere in the forecasting engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("id {id} out of vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("numeric failure at {location}: {detail}")]
    NumericFailure { location: String, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NumericFailure {
            location: location.into(),
            detail: detail.into(),
        }
    }

    /// True when the error came from non-finite values rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericFailure { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
