use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("insufficient length: need at least {needed}, got {got}")]
    InsufficientLength { needed: usize, got: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("inconsistent state: {0}")]
    Consistency(String),
    #[error("undefined mean: {0}")]
    UndefinedMean(String),
    #[error("incompatible artifacts: {0}")]
    Compatibility(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("stage ordering error: {0}")]
    Ordering(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    /// Stable machine-readable code used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "E_INVALID_INPUT",
            Error::Shape { .. } => "E_SHAPE",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::InsufficientLength { .. } => "E_INSUFFICIENT_LENGTH",
            Error::InsufficientData(_) => "E_INSUFFICIENT_DATA",
            Error::Consistency(_) => "E_CONSISTENCY",
            Error::UndefinedMean(_) => "E_UNDEFINED_MEAN",
            Error::Compatibility(_) => "E_COMPATIBILITY",
            Error::Alignment(_) => "E_ALIGNMENT",
            Error::Protocol(_) => "E_PROTOCOL",
            Error::Stratification(_) => "E_STRATIFICATION",
            Error::Ordering(_) => "E_ORDERING",
            Error::Parse { .. } => "E_PARSE",
            Error::Divergence(_) => "E_DIVERGENCE",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Wav(_) => "E_INPUT",
        }
    }

    pub(crate) fn shape(node: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.to_string(),
            detail: detail.into(),
        }
    }
}
