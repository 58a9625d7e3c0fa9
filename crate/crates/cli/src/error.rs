use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Model(#[from] fas_gnn::FasError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Config(_) => 3,
            CliError::Model(fas_gnn::FasError::Config(_) | fas_gnn::FasError::Budget { .. }) => 3,
            _ => 1,
        }
    }
}
