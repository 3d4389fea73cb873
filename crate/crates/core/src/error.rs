use thiserror::Error;
use usam_numerics::TensorError;

pub type Result<T> = std::result::Result<T, UsamError>;

#[derive(Debug, Error)]
pub enum UsamError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("argument: {0}")]
    Argument(String),
    #[error("format: {0}")]
    Format(String),
    #[error("checkpoint fingerprint {found} does not match config fingerprint {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl UsamError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        UsamError::Config(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        UsamError::Argument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        UsamError::Format(msg.into())
    }
}
