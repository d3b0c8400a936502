//! Fixed-rank spatial covariance estimation on a fitted eigenbasis.
//!
//! Given `Φ̂`, the noise variance `σ²` and the `K x K` matrix `Λ ⪰ 0` minimize
//!
//! ```text
//! ½ ‖S - Φ̂ Λ Φ̂' - σ² I‖²_F + γ ‖Φ̂ Λ Φ̂'‖_*
//! ```
//!
//! which has a closed-form solution in terms of the eigendecomposition of
//! `Φ̂' S Φ̂`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SpatError};
use crate::linalg::{sample_covariance, sym_eigen, symmetrize};
use crate::solver::{DataMatrix, EigenBasis};
use crate::tps::{evaluate_many, SpatialDomain};

/// `S = Y'Y / n` for zero-mean data.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance {
    pub s: DMatrix<f64>,
    pub n: usize,
}

impl SampleCovariance {
    pub fn from_data(y: &DataMatrix) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SpatError::Data("data matrix contains NaN or infinite entries".into()));
        }
        Ok(Self {
            s: sample_covariance(y),
            n: y.nrows(),
        })
    }

    pub fn p(&self) -> usize {
        self.s.nrows()
    }
}

/// Closed-form solution for a fixed `Φ̂` and `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceParams {
    pub sigma2: f64,
    /// `Λ̂ = V̂ diag(λ*) V̂'`.
    pub lambda: DMatrix<f64>,
    pub vhat: DMatrix<f64>,
    /// Eigenvalues of `Φ̂' S Φ̂`, non-increasing.
    pub d_hat: DVector<f64>,
    /// `max(d̂_k - σ̂² - γ, 0)`, non-increasing.
    pub lambda_star: DVector<f64>,
    pub lhat: usize,
    pub gamma: f64,
}

/// Fitted covariance model: the parameters together with the basis they
/// were estimated on.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    pub params: CovarianceParams,
    pub basis: EigenBasis,
}

impl CovarianceModel {
    pub fn sigma2(&self) -> f64 {
        self.params.sigma2
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.params.lambda
    }

    /// `Φ̂ Λ̂ Φ̂'` at the nodes.
    pub fn node_covariance(&self) -> DMatrix<f64> {
        let phi = &self.basis.phi;
        phi * &self.params.lambda * phi.transpose()
    }

    /// `Φ̂ Λ̂ Φ̂' + σ̂² I`, the implied covariance of one observation vector.
    pub fn observation_covariance(&self) -> DMatrix<f64> {
        let p = self.basis.phi.nrows();
        self.node_covariance() + DMatrix::identity(p, p) * self.params.sigma2
    }
}

/// Solves for `(σ̂², Λ̂)` given any `Φ̂` with orthonormal columns.
pub fn estimate_from_phi(s: &DMatrix<f64>, phi: &DMatrix<f64>, gamma: f64) -> Result<CovarianceParams> {
    let p = s.nrows();
    let k = phi.ncols();
    if !s.is_square() || phi.nrows() != p {
        return Err(SpatError::Shape(format!(
            "covariance is {}x{}, basis is {}x{}",
            s.nrows(),
            s.ncols(),
            phi.nrows(),
            k
        )));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(SpatError::Argument(format!("gamma must be finite and nonnegative, got {gamma}")));
    }
    if k >= p {
        return Err(SpatError::Argument(format!(
            "noise variance is not identifiable with K={k} >= p={p}"
        )));
    }

    let projected = symmetrize(&(phi.transpose() * s * phi));
    let eig = sym_eigen(&projected)?;
    let d_hat = eig.values;
    let trace = s.trace();

    let mut lhat = 0usize;
    let mut sigma2 = trace / p as f64;
    if d_hat[0] > gamma {
        let mut partial = 0.0;
        for l in 1..=k {
            partial += d_hat[l - 1] - gamma;
            let bound = (trace - partial) / (p - l) as f64;
            if d_hat[l - 1] - gamma > bound {
                lhat = l;
            }
        }
        if lhat > 0 {
            let active: f64 = (0..lhat).map(|i| d_hat[i] - gamma).sum();
            sigma2 = (trace - active) / (p - lhat) as f64;
        }
    }
    if sigma2 < 0.0 {
        if sigma2 < -1e-12 {
            log::info!("clamping negative noise variance {sigma2:e} to zero");
        }
        sigma2 = 0.0;
    }

    let lambda_star = d_hat.map(|d| (d - sigma2 - gamma).max(0.0));
    let vhat = eig.vectors;
    let lambda = symmetrize(&(&vhat * DMatrix::from_diagonal(&lambda_star) * vhat.transpose()));
    Ok(CovarianceParams {
        sigma2,
        lambda,
        vhat,
        d_hat,
        lambda_star,
        lhat,
        gamma,
    })
}

pub fn estimate_parameters(s: &SampleCovariance, basis: &EigenBasis, gamma: f64) -> Result<CovarianceModel> {
    let params = estimate_from_phi(&s.s, &basis.phi, gamma)?;
    Ok(CovarianceModel {
        params,
        basis: basis.clone(),
    })
}

/// `½ ‖S - Φ Λ Φ' - σ² I‖²_F + γ ‖Φ Λ Φ'‖_*` for `Φ` with orthonormal columns.
pub fn covariance_objective(s: &DMatrix<f64>, phi: &DMatrix<f64>, lambda: &DMatrix<f64>, sigma2: f64, gamma: f64) -> f64 {
    let p = s.nrows();
    let low_rank = phi * lambda * phi.transpose();
    let resid = s - &low_rank - DMatrix::identity(p, p) * sigma2;
    // Φ orthonormal: the nonzero singular values of ΦΛΦ' are those of Λ.
    let nuclear: f64 = lambda.clone().singular_values().iter().sum();
    0.5 * resid.norm_squared() + gamma * nuclear
}

/// `Ĉ(s, s*)` for single points.
pub fn covariance_at(model: &CovarianceModel, domain: &SpatialDomain, s: &[f64], s_star: &[f64]) -> Result<f64> {
    let d = domain.dim();
    if s.len() != d || s_star.len() != d {
        return Err(SpatError::Shape(format!(
            "points have {} and {} coordinates, domain has {d}",
            s.len(),
            s_star.len()
        )));
    }
    let a = DMatrix::from_row_slice(1, d, s);
    let b = DMatrix::from_row_slice(1, d, s_star);
    Ok(covariance_matrix(model, domain, &a, &b)?[(0, 0)])
}

/// Matrix of `Ĉ(a_i, b_j)` for two sets of query points.
pub fn covariance_matrix(
    model: &CovarianceModel,
    domain: &SpatialDomain,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let psi_a = evaluate_many(&model.basis.splines, domain, a)?;
    let psi_b = evaluate_many(&model.basis.splines, domain, b)?;
    let lambda = &model.params.lambda;
    // Symmetrize the bilinear form so Ĉ(s, s*) = Ĉ(s*, s) holds bit-for-bit.
    let left = &psi_a * lambda * psi_b.transpose();
    let right = (&psi_b * lambda * psi_a.transpose()).transpose();
    Ok((left + right) * 0.5)
}

/// `Φ̂ V̂` at the nodes.
pub fn rotated_eigenfunctions(model: &CovarianceModel) -> DMatrix<f64> {
    &model.basis.phi * &model.params.vhat
}

/// Conditional-mean predictor under `Y_i ~ (0, Φ̂ Λ̂ Φ̂' + σ̂² I)`:
/// `ψ(s_0)' Λ̂ Φ̂' (Φ̂ Λ̂ Φ̂' + σ̂² I)^{-1} Y_i`, returned as `n x q`.
///
/// With orthonormal `Φ̂` the weight reduces to `Λ̂ (Λ̂ + σ̂² I)^+ Φ̂' Y_i`.
/// When `σ̂² = 0` and `Λ̂` is singular the pseudo-inverse drops the null
/// directions of `Λ̂`.
pub fn predict(
    model: &CovarianceModel,
    domain: &SpatialDomain,
    y: &DataMatrix,
    query: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let phi = &model.basis.phi;
    if y.ncols() != phi.nrows() {
        return Err(SpatError::Shape(format!(
            "data has {} sites, model has {}",
            y.ncols(),
            phi.nrows()
        )));
    }
    let sigma2 = model.params.sigma2;
    let shrink = model.params.lambda_star.map(|l| {
        let denom = l + sigma2;
        if denom > 0.0 {
            l / denom
        } else {
            0.0
        }
    });
    let vhat = &model.params.vhat;
    let weight = vhat * DMatrix::from_diagonal(&shrink) * vhat.transpose();
    let psi = evaluate_many(&model.basis.splines, domain, query)?;
    // (n x p)(p x K)(K x K)(K x q)
    Ok(y * phi * weight * psi.transpose())
}
