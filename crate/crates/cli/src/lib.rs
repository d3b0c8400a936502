//! Command-line front end for the `spatpca` estimator: CSV ingestion, JSON
//! model files, and the `fit`, `eval`, `scree`, `simulate` and `cv` commands.

pub mod commands;
pub mod error;
pub mod ingest;
pub mod model;

pub use commands::run;
pub use error::CliError;
