use thiserror::Error;

/// Errors produced by model construction, training and data handling.
#[derive(Debug, Error)]
pub enum NamError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl NamError {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            NamError::Usage(_)
            | NamError::Config(_)
            | NamError::Index { .. }
            | NamError::UndefinedMetric(_) => 2,
            NamError::Dimension(_) | NamError::Data(_) | NamError::Io(_) => 3,
            NamError::Numeric(_) => 4,
        }
    }
}

impl From<csv::Error> for NamError {
    fn from(e: csv::Error) -> Self {
        NamError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for NamError {
    fn from(e: serde_json::Error) -> Self {
        NamError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, NamError>;
