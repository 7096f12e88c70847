use bmr_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BmrError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BmrError> = std::result::Result<T, E>;
