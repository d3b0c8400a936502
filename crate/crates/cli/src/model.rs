//! JSON model files.
//!
//! Matrices are stored as arrays of columns. `serde_json` writes the
//! shortest decimal that parses back to the same `f64`, so a save/load
//! cycle is exact.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spatpca::covariance::CovarianceParams;
use spatpca::tuning::{GammaCvReport, TauCvReport};
use spatpca::{CovarianceModel, EigenBasis, SolverConfig, SpatialDomain, SplineCoefficients};

use crate::error::CliError;
use crate::ingest::{IngestOptions, IngestReport};

pub const SCHEMA_VERSION: u32 = 1;

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().cloned().collect()).collect()
}

fn from_columns(cols: &[Vec<f64>], rows: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if cols.iter().any(|c| c.len() != rows) {
        return Err(CliError::Input(format!("model field {what}: columns must have {rows} entries")));
    }
    Ok(DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DomainRecord {
    pub dim: usize,
    /// One entry per site.
    pub locations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SplineRecord {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BasisRecord {
    pub config: SolverConfig,
    /// `K` columns of length `p`.
    pub phi: Vec<Vec<f64>>,
    pub sparse: Vec<Vec<f64>>,
    pub splines: Vec<SplineRecord>,
    pub sample_variances: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CovarianceRecord {
    pub gamma: f64,
    pub sigma2: f64,
    pub lambda: Vec<Vec<f64>>,
    pub vhat: Vec<Vec<f64>>,
    pub d_hat: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub lhat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Provenance {
    pub data_sha256: String,
    pub locations_sha256: String,
    pub seed: u64,
    pub folds: usize,
    pub ingest: IngestOptions,
    pub ingest_report: IngestReport,
    pub tau_cv: Option<TauCvReport>,
    pub gamma_cv: Option<GammaCvReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelFile {
    pub schema_version: u32,
    pub domain: DomainRecord,
    pub basis: BasisRecord,
    pub covariance: Option<CovarianceRecord>,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn new(
        domain: &SpatialDomain,
        basis: &EigenBasis,
        covariance: Option<&CovarianceModel>,
        provenance: Provenance,
    ) -> Self {
        let locs = domain.locations();
        Self {
            schema_version: SCHEMA_VERSION,
            domain: DomainRecord {
                dim: domain.dim(),
                locations: locs.row_iter().map(|r| r.iter().cloned().collect()).collect(),
            },
            basis: BasisRecord {
                config: basis.config.clone(),
                phi: columns(&basis.phi),
                sparse: columns(&basis.sparse),
                splines: basis
                    .splines
                    .iter()
                    .map(|s| SplineRecord {
                        a: s.a.iter().cloned().collect(),
                        b: s.b.iter().cloned().collect(),
                    })
                    .collect(),
                sample_variances: basis.sample_variances.iter().cloned().collect(),
                converged: basis.converged,
                iterations: basis.iterations,
                residual: basis.residual,
            },
            covariance: covariance.map(|c| {
                let p = &c.params;
                CovarianceRecord {
                    gamma: p.gamma,
                    sigma2: p.sigma2,
                    lambda: columns(&p.lambda),
                    vhat: columns(&p.vhat),
                    d_hat: p.d_hat.iter().cloned().collect(),
                    lambda_star: p.lambda_star.iter().cloned().collect(),
                    lhat: p.lhat,
                }
            }),
            provenance,
        }
    }

    pub fn domain(&self) -> Result<SpatialDomain, CliError> {
        let d = self.domain.dim;
        if self.domain.locations.iter().any(|r| r.len() != d) {
            return Err(CliError::Input(format!("model locations must have {d} coordinates")));
        }
        let p = self.domain.locations.len();
        let m = DMatrix::from_fn(p, d, |i, j| self.domain.locations[i][j]);
        Ok(SpatialDomain::new(m)?)
    }

    pub fn basis(&self) -> Result<EigenBasis, CliError> {
        let p = self.domain.locations.len();
        let d = self.domain.dim;
        let b = &self.basis;
        let k = b.phi.len();
        if b.splines.len() != k || b.sparse.len() != k || b.sample_variances.len() != k {
            return Err(CliError::Input(format!("model basis fields disagree on K={k}")));
        }
        if b.splines.iter().any(|s| s.a.len() != p || s.b.len() != d + 1) {
            return Err(CliError::Input("model spline coefficients have the wrong length".into()));
        }
        Ok(EigenBasis {
            phi: from_columns(&b.phi, p, "phi")?,
            sparse: from_columns(&b.sparse, p, "sparse")?,
            splines: b
                .splines
                .iter()
                .map(|s| SplineCoefficients {
                    a: DVector::from_column_slice(&s.a),
                    b: DVector::from_column_slice(&s.b),
                })
                .collect(),
            config: b.config.clone(),
            sample_variances: DVector::from_column_slice(&b.sample_variances),
            converged: b.converged,
            iterations: b.iterations,
            residual: b.residual,
        })
    }

    pub fn covariance(&self) -> Result<Option<CovarianceModel>, CliError> {
        let Some(c) = &self.covariance else {
            return Ok(None);
        };
        let basis = self.basis()?;
        let k = basis.k();
        if c.d_hat.len() != k || c.lambda_star.len() != k {
            return Err(CliError::Input(format!("model covariance fields disagree on K={k}")));
        }
        Ok(Some(CovarianceModel {
            params: CovarianceParams {
                sigma2: c.sigma2,
                lambda: from_columns(&c.lambda, k, "lambda")?,
                vhat: from_columns(&c.vhat, k, "vhat")?,
                d_hat: DVector::from_column_slice(&c.d_hat),
                lambda_star: DVector::from_column_slice(&c.lambda_star),
                lhat: c.lhat,
                gamma: c.gamma,
            },
            basis,
        }))
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let m: ModelFile =
            serde_json::from_str(text).map_err(|e| CliError::Input(format!("model file: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(CliError::Input(format!(
                "model schema version {} is not supported (expected {SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(())
}
