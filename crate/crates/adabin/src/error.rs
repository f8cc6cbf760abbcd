use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?} ({context})")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
        context: String,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph state: {0}")]
    GraphState(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {what}: {detail} (offset {offset})")]
    Format {
        what: String,
        detail: String,
        offset: u64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shapes(expected: &[usize], actual: &[usize], context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
            context: context.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
