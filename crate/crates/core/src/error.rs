use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpatError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatError {
    #[error("unsupported spatial dimension {0} (expected 1, 2 or 3)")]
    Dimension(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bordered spline system is numerically singular: sites {first} and {second} coincide")]
    DuplicateSites { first: usize, second: usize },

    #[error("bordered spline system is numerically singular: {0}")]
    Conditioning(String),

    #[error("rho too small: {rho} does not exceed the minimum admissible value {min_rho}")]
    RhoTooSmall { rho: f64, min_rho: f64 },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}
