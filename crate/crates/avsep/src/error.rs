use thiserror::Error;

#[derive(Error, Debug)]
pub enum AvsepError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("clip too short: {got} samples, need at least {need}")]
    ClipTooShort { got: usize, need: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unknown category id {0}")]
    UnknownCategory(usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("output path {0} already exists (pass overwrite to replace)")]
    AlreadyExists(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for AvsepError {
    fn from(e: image::ImageError) -> Self {
        AvsepError::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AvsepError>;
