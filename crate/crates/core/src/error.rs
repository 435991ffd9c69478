use thiserror::Error;

#[derive(Debug, Error)]
pub enum KaqError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("search space too large: {size} candidates exceeds limit {limit}")]
    SearchSpace { size: f64, limit: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, KaqError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(KaqError::Dimension(msg.into()))
}
