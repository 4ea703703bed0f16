use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Validation { what: &'static str, reason: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: u64, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("feature statistics: {0}")]
    Stats(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Validation { what, reason: reason.into() }
}
