//! Smooth, sparse and orthonormal principal components of spatial fields.
//!
//! Estimates smooth and localized orthonormal eigenfunctions from `n`
//! repeated measurements at `p` sites, then builds a fixed-rank spatial
//! covariance estimate on top of them.
//!
//! - [`tps`]: thin-plate spline kernel, roughness matrix and interpolation.
//! - [`solver`]: the ADMM estimator.
//! - [`covariance`]: closed-form noise/covariance parameters and prediction.
//! - [`tuning`]: M-fold cross-validation of all tuning parameters.
//! - [`simharness`]: synthetic experiments and loss functions.

pub mod covariance;
pub mod error;
pub mod linalg;
pub mod simharness;
pub mod solver;
pub mod tps;
pub mod tuning;

pub use covariance::{CovarianceModel, SampleCovariance};
pub use error::{Result, SpatError};
pub use solver::{DataMatrix, EigenBasis, SolverConfig, Variant};
pub use tps::{PenaltyOperator, SpatialDomain, SplineCoefficients};
