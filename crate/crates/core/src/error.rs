use alloc::string::String;

pub type CoreResult<T> = Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("non-finite value in {what} (batch index {index})")]
    Numerical { what: String, index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}
