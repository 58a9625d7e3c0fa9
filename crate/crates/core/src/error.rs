use fas_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FasError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite value in {stage} at layer {layer}")]
    NonFinite { stage: String, layer: usize },
    #[error("grid needs {required} evaluations but the budget is {budget}")]
    Budget { required: u128, budget: u128 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FasError>;
