use thiserror::Error;

/// Errors raised anywhere in the task-sampling pipeline.
#[derive(Debug, Error)]
pub enum RatsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid task space: {0}")]
    InvalidSpace(String),

    #[error("task identifier out of bounds in dimension {dim}: {value} not in [{lo}, {hi}]")]
    OutOfBounds {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("history batch is empty")]
    EmptyBatch,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("subset enumeration needs {needed} combinations, limit is {limit}")]
    TooManyCombinations { needed: u128, limit: u128 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed log: {0}")]
    MalformedLog(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RatsError>;

impl RatsError {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        RatsError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
