use spatpca::SpatError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("input: {0}")]
    Input(String),
    #[error("{0}")]
    Model(SpatError),
    #[error("internal: {0}")]
    Internal(String),
}

impl From<SpatError> for CliError {
    fn from(e: SpatError) -> Self {
        CliError::Model(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl CliError {
    /// 1 for bad flags or inputs, 3 for failures inside the numerics or I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 1,
            CliError::Model(SpatError::Numerical(_) | SpatError::RhoTooSmall { .. }) => 3,
            CliError::Model(_) => 1,
            CliError::Internal(_) => 3,
        }
    }
}
