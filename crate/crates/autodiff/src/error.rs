use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("matrix is not Hermitian (max asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("loss must be a real scalar: {0}")]
    InvalidLoss(String),

    #[error("batch normalization needs at least 2 rows in training mode, got {0}")]
    BatchTooSmall(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
