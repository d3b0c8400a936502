//! Smooth, sparse, orthonormal eigenvector estimation by ADMM.
//!
//! The estimator minimizes
//!
//! ```text
//! ‖Y - Y Φ Φ'‖²_F + τ1 Σ_k φ_k' Ω φ_k + τ2 Σ_jk |φ_jk|    subject to Φ'Φ = I_K
//! ```
//!
//! with the variance ordering `φ_1' S φ_1 ≥ φ_2' S φ_2 ≥ ...`. Two ADMM
//! splittings are provided: a fully closed-form one with blocks `(Φ, Q, R)`
//! and one whose `Φ`-update is a Lasso problem solved by coordinate descent.
//! The penalty parameter grows geometrically between iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpatError};
use crate::linalg::{polar_factor, sign_convention_factor, sym_eigen, symmetrize};
use crate::tps::{solve_coefficients, PenaltyOperator, SplineCoefficients};

/// Observations in rows, sites in columns (`n x p`), assumed zero-mean.
pub type DataMatrix = DMatrix<f64>;

/// Multiplier applied to the largest eigenvalue of `Y'Y` when `rho0` is automatic.
pub const AUTO_RHO_FACTOR: f64 = 10.0;
/// Ceiling on the penalty parameter, relative to its starting value.
pub const RHO_CAP_FACTOR: f64 = 1e12;
/// Convergence tolerance of the inner coordinate descent in the Lasso variant.
pub const LASSO_INNER_TOLERANCE: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    ClosedForm,
    LassoInner,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Rho {
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SolverConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub k: usize,
    pub rho0: Rho,
    pub rho_growth: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub variant: Variant,
}

impl SolverConfig {
    pub fn new(tau1: f64, tau2: f64, k: usize) -> Self {
        Self {
            tau1,
            tau2,
            k,
            rho0: Rho::Auto,
            rho_growth: 1.5,
            tolerance: 1e-6,
            max_iterations: 1000,
            variant: Variant::ClosedForm,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_tuning(&self, tau1: f64, tau2: f64) -> Self {
        Self {
            tau1,
            tau2,
            ..self.clone()
        }
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        if !(self.tau1 >= 0.0 && self.tau1.is_finite()) || !(self.tau2 >= 0.0 && self.tau2.is_finite()) {
            return Err(SpatError::Argument(format!(
                "tuning parameters must be finite and nonnegative, got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        if self.k == 0 || self.k > n.min(p) {
            return Err(SpatError::Argument(format!(
                "rank K={} must lie in 1..={} (min of n={n}, p={p})",
                self.k,
                n.min(p)
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(SpatError::Argument("tolerance must be positive".into()));
        }
        if !(self.rho_growth > 1.0) {
            return Err(SpatError::Argument("rho growth factor must exceed 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(SpatError::Argument("max iterations must be positive".into()));
        }
        if let Rho::Fixed(r) = self.rho0 {
            if !(r > 0.0 && r.is_finite()) {
                return Err(SpatError::Argument(format!("rho0 must be positive, got {r}")));
            }
        }
        Ok(())
    }
}

/// Primal blocks `Φ, Q, R`, duals `Γ_1` (paired with `Φ = Q`) and `Γ_2`
/// (paired with `Φ = R`), and the current penalty parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub phi: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gamma1: DMatrix<f64>,
    pub gamma2: DMatrix<f64>,
    pub rho: f64,
}

impl AdmmState {
    /// All primal blocks at `start`, zero duals.
    pub fn from_start(start: &DMatrix<f64>, rho: f64) -> Self {
        let zeros = DMatrix::zeros(start.nrows(), start.ncols());
        Self {
            phi: start.clone(),
            q: start.clone(),
            r: start.clone(),
            gamma1: zeros.clone(),
            gamma2: zeros,
            rho,
        }
    }
}

/// The fitted eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    /// `p x K`, exactly orthonormal columns (the `Q` block).
    pub phi: DMatrix<f64>,
    /// The block carrying the exact zeros of the sparsity penalty (`R` for the
    /// closed-form variant, the Lasso iterate `Φ` otherwise), columns aligned with `phi`.
    pub sparse: DMatrix<f64>,
    pub splines: Vec<SplineCoefficients>,
    pub config: SolverConfig,
    /// `φ_k' S φ_k`, non-increasing.
    pub sample_variances: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Stopping-rule value at the returned iterate.
    pub residual: f64,
}

impl EigenBasis {
    pub fn k(&self) -> usize {
        self.phi.ncols()
    }
}

/// Element-wise `sign(m) max(|m| - tau, 0)`.
pub fn soft_threshold(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    m.map(|v| soft_threshold_scalar(v, tau))
}

pub fn soft_threshold_scalar(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// `Y'Y` with its largest eigenvalue, shared by every fit on the same data.
#[derive(Debug, Clone)]
pub struct Gram {
    yty: DMatrix<f64>,
    n: usize,
    lambda_max: f64,
}

impl Gram {
    pub fn new(y: &DataMatrix) -> Result<Self> {
        if y.nrows() == 0 || y.ncols() == 0 {
            return Err(SpatError::Data("empty data matrix".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SpatError::Data("data matrix contains NaN or infinite entries".into()));
        }
        let yty = symmetrize(&(y.transpose() * y));
        let lambda_max = sym_eigen(&yty)?.values[0].max(0.0);
        Ok(Self {
            yty,
            n: y.nrows(),
            lambda_max,
        })
    }

    pub fn yty(&self) -> &DMatrix<f64> {
        &self.yty
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.yty.nrows()
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// `S = Y'Y / n`.
    pub fn sample_covariance(&self) -> DMatrix<f64> {
        &self.yty / self.n as f64
    }

    pub fn auto_rho(&self) -> f64 {
        if self.lambda_max > 0.0 {
            AUTO_RHO_FACTOR * self.lambda_max
        } else {
            1.0
        }
    }
}

/// Eigendecomposition `U diag(μ) U'` of `Y'Y - τ1 Ω` for one smoothing level.
///
/// Every linear system of the ADMM iterations is diagonal in this basis, so
/// one factorization serves all penalty values, columns and iterations.
#[derive(Debug, Clone)]
pub struct SpectralSystem {
    tau1: f64,
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

impl SpectralSystem {
    pub fn new(gram: &Gram, penalty: &PenaltyOperator, tau1: f64) -> Result<Self> {
        if penalty.num_sites() != gram.p() {
            return Err(SpatError::Shape(format!(
                "penalty has {} sites, data has {} columns",
                penalty.num_sites(),
                gram.p()
            )));
        }
        let m = gram.yty() - penalty.omega() * tau1;
        let eig = sym_eigen(&m)?;
        Ok(Self {
            tau1,
            vectors: eig.vectors,
            values: eig.values,
        })
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }

    /// Largest eigenvalue of `Y'Y - τ1 Ω`.
    pub fn top_eigenvalue(&self) -> f64 {
        self.values[0]
    }

    /// Top-`k` eigenvectors with the sign convention applied.
    pub fn leading_vectors(&self, k: usize) -> DMatrix<f64> {
        let mut out = self.vectors.columns(0, k).into_owned();
        crate::linalg::apply_sign_convention_columns(&mut out);
        out
    }

    /// `U diag(f(μ)) U' rhs`.
    fn apply_spectral<F: Fn(f64) -> f64>(&self, f: F, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut proj = self.vectors.transpose() * rhs;
        for (i, mut row) in proj.row_iter_mut().enumerate() {
            row *= f(self.values[i]);
        }
        &self.vectors * proj
    }

    fn spectral_matrix<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[j]);
        }
        scaled * self.vectors.transpose()
    }

    fn check_rho(&self, rho: f64) -> Result<()> {
        let min_rho = self.top_eigenvalue();
        if !(rho > min_rho) {
            return Err(SpatError::RhoTooSmall { rho, min_rho });
        }
        Ok(())
    }

    /// `½ (τ1 Ω + ρ I - Y'Y)^{-1} rhs`.
    pub fn solve_shifted(&self, rho: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rho(rho)?;
        Ok(self.apply_spectral(|mu| 0.5 / (rho - mu), rhs))
    }

    /// `X = (τ1 Ω - Y'Y + ρ I / 2)^{1/2}`, the Lasso design of the inner variant.
    pub fn lasso_design(&self, rho: f64) -> Result<DMatrix<f64>> {
        self.check_rho(rho / 2.0)?;
        Ok(symmetrize(&self.spectral_matrix(|mu| (rho / 2.0 - mu).sqrt())))
    }

    /// `X^{-1} rhs` for the design of [`lasso_design`](Self::lasso_design).
    pub fn lasso_design_solve(&self, rho: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rho(rho / 2.0)?;
        Ok(self.apply_spectral(|mu| 1.0 / (rho / 2.0 - mu).sqrt(), rhs))
    }
}

/// Top-`k` eigenvectors (by algebraic eigenvalue) of `Y'Y - τ1 Ω`.
pub fn initial_phi(y: &DataMatrix, penalty: &PenaltyOperator, tau1: f64, k: usize) -> Result<DMatrix<f64>> {
    if k == 0 || k > y.ncols() {
        return Err(SpatError::Argument(format!("K={k} must lie in 1..={}", y.ncols())));
    }
    let gram = Gram::new(y)?;
    Ok(SpectralSystem::new(&gram, penalty, tau1)?.leading_vectors(k))
}

/// One closed-form ADMM iteration at the state's `ρ`.
pub fn admm_step(
    state: &AdmmState,
    y: &DataMatrix,
    penalty: &PenaltyOperator,
    config: &SolverConfig,
) -> Result<AdmmState> {
    let gram = Gram::new(y)?;
    let system = SpectralSystem::new(&gram, penalty, config.tau1)?;
    closed_form_step(&system, state, config.tau2)
}

pub(crate) fn closed_form_step(system: &SpectralSystem, state: &AdmmState, tau2: f64) -> Result<AdmmState> {
    let rho = state.rho;
    let rhs = (&state.q + &state.r) * rho - &state.gamma1 - &state.gamma2;
    let phi = system.solve_shifted(rho, &rhs)?;
    let q = polar_factor(&(&phi + &state.gamma1 / rho))?;
    let r = soft_threshold(&(&phi * rho + &state.gamma2), tau2) / rho;
    let gamma1 = &state.gamma1 + (&phi - &q) * rho;
    let gamma2 = &state.gamma2 + (&phi - &r) * rho;
    Ok(AdmmState {
        phi,
        q,
        r,
        gamma1,
        gamma2,
        rho,
    })
}

/// Cyclic coordinate descent for `min_x ‖z - X x‖² + tau ‖x‖_1`, given the
/// Gram matrix `X'X` and `X'z`. Stops when no coordinate moves more than `tol`.
pub fn lasso_coordinate_descent(
    gram: &DMatrix<f64>,
    xtz: &DVector<f64>,
    tau: f64,
    init: &DVector<f64>,
    tol: f64,
) -> DVector<f64> {
    let p = xtz.len();
    let mut x = init.clone();
    // corr_j = x_j' (z - X x)
    let mut corr = xtz - gram * &x;
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut max_move = 0.0_f64;
        for j in 0..p {
            let gjj = gram[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let old = x[j];
            let partial = corr[j] + gjj * old;
            let new = soft_threshold_scalar(partial, tau / 2.0) / gjj;
            let delta = new - old;
            if delta != 0.0 {
                x[j] = new;
                corr.axpy(-delta, &gram.column(j), 1.0);
                max_move = max_move.max(delta.abs());
            }
        }
        if max_move < tol {
            break;
        }
    }
    x
}

/// One iteration of the Lasso-inner ADMM. Uses `phi`, `q`, `gamma1` of the
/// state; `r` mirrors `phi` and `gamma2` stays zero.
pub fn lasso_admm_step(
    state: &AdmmState,
    y: &DataMatrix,
    penalty: &PenaltyOperator,
    config: &SolverConfig,
) -> Result<AdmmState> {
    let gram = Gram::new(y)?;
    let system = SpectralSystem::new(&gram, penalty, config.tau1)?;
    lasso_step(&system, state, config.tau2)
}

pub(crate) fn lasso_step(system: &SpectralSystem, state: &AdmmState, tau2: f64) -> Result<AdmmState> {
    let rho = state.rho;
    let x = system.lasso_design(rho)?;
    let target = (&state.q * rho - &state.gamma1) * 0.5;
    let z = system.lasso_design_solve(rho, &target)?;
    let xtx = x.transpose() * &x;
    let xtz = x.transpose() * &z;

    let mut phi = state.phi.clone();
    for k in 0..phi.ncols() {
        let col = lasso_coordinate_descent(
            &xtx,
            &xtz.column(k).into_owned(),
            tau2,
            &state.phi.column(k).into_owned(),
            LASSO_INNER_TOLERANCE,
        );
        phi.set_column(k, &col);
    }
    let q = polar_factor(&(&phi + &state.gamma1 / rho))?;
    let gamma1 = &state.gamma1 + (&phi - &q) * rho;
    Ok(AdmmState {
        r: phi.clone(),
        phi,
        q,
        gamma1,
        gamma2: state.gamma2.clone(),
        rho,
    })
}

/// Fits the estimator on centered data.
pub fn fit(
    y: &DataMatrix,
    penalty: &PenaltyOperator,
    config: &SolverConfig,
    warm_start: Option<&DMatrix<f64>>,
) -> Result<EigenBasis> {
    let gram = Gram::new(y)?;
    config.validate(gram.n(), gram.p())?;
    let system = SpectralSystem::new(&gram, penalty, config.tau1)?;
    fit_prepared(&gram, &system, penalty, config, warm_start)
}

/// Same as [`fit`] with the variant forced to the Lasso-inner splitting.
pub fn fit_lasso_variant(
    y: &DataMatrix,
    penalty: &PenaltyOperator,
    config: &SolverConfig,
    warm_start: Option<&DMatrix<f64>>,
) -> Result<EigenBasis> {
    fit(y, penalty, &config.clone().with_variant(Variant::LassoInner), warm_start)
}

/// [`fit`] with `Y'Y` and the spectral system already computed.
pub fn fit_prepared(
    gram: &Gram,
    system: &SpectralSystem,
    penalty: &PenaltyOperator,
    config: &SolverConfig,
    warm_start: Option<&DMatrix<f64>>,
) -> Result<EigenBasis> {
    config.validate(gram.n(), gram.p())?;
    if (system.tau1() - config.tau1).abs() > 0.0 {
        return Err(SpatError::Argument(format!(
            "spectral system was built for tau1={}, config has tau1={}",
            system.tau1(),
            config.tau1
        )));
    }
    let p = gram.p();
    let k = config.k;

    let start = match warm_start {
        Some(w) => {
            if w.shape() != (p, k) {
                return Err(SpatError::Shape(format!(
                    "warm start is {}x{}, expected {p}x{k}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            w.clone()
        }
        None => system.leading_vectors(k),
    };

    let rho0 = match config.rho0 {
        Rho::Auto => gram.auto_rho(),
        Rho::Fixed(r) => r,
    };
    let rho_cap = rho0 * RHO_CAP_FACTOR;
    let scale = 1.0 / (p as f64).sqrt();

    let mut state = AdmmState::from_start(&start, rho0);
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < config.max_iterations {
        let next = match config.variant {
            Variant::ClosedForm => closed_form_step(system, &state, config.tau2)?,
            Variant::LassoInner => lasso_step(system, &state, config.tau2)?,
        };
        iterations += 1;
        let step = (&next.phi - &state.phi).norm();
        let gap_q = (&next.phi - &next.q).norm();
        let gap_r = match config.variant {
            Variant::ClosedForm => (&next.phi - &next.r).norm(),
            Variant::LassoInner => 0.0,
        };
        residual = scale * step.max(gap_q).max(gap_r);
        if !residual.is_finite() {
            return Err(SpatError::Numerical(format!(
                "ADMM diverged at iteration {iterations}"
            )));
        }
        state = next;
        if residual <= config.tolerance {
            converged = true;
            break;
        }
        state.rho = (state.rho * config.rho_growth).min(rho_cap);
    }
    if !converged {
        log::warn!(
            "ADMM stopped after {iterations} iterations with residual {residual:e} (tolerance {:e})",
            config.tolerance
        );
    }

    finish_basis(gram, penalty, config, state.q, state.r, converged, iterations, residual)
}

#[allow(clippy::too_many_arguments)]
fn finish_basis(
    gram: &Gram,
    penalty: &PenaltyOperator,
    config: &SolverConfig,
    q: DMatrix<f64>,
    sparse: DMatrix<f64>,
    converged: bool,
    iterations: usize,
    residual: f64,
) -> Result<EigenBasis> {
    let s = gram.sample_covariance();
    let k = q.ncols();
    let variances: Vec<f64> = (0..k)
        .map(|j| {
            let c = q.column(j);
            (c.transpose() * &s * c)[(0, 0)]
        })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| variances[b].partial_cmp(&variances[a]).unwrap_or(std::cmp::Ordering::Equal));

    let mut phi = DMatrix::from_fn(q.nrows(), k, |i, j| q[(i, order[j])]);
    let mut sparse = DMatrix::from_fn(q.nrows(), k, |i, j| sparse[(i, order[j])]);
    for j in 0..k {
        if sign_convention_factor(phi.column(j).as_slice()) < 0.0 {
            phi.column_mut(j).neg_mut();
            sparse.column_mut(j).neg_mut();
        }
    }
    let sample_variances = DVector::from_iterator(k, order.iter().map(|&j| variances[j]));

    let splines = (0..k)
        .map(|j| solve_coefficients(penalty, &phi.column(j).into_owned()))
        .collect::<Result<Vec<_>>>()?;

    Ok(EigenBasis {
        phi,
        sparse,
        splines,
        config: config.clone(),
        sample_variances,
        converged,
        iterations,
        residual,
    })
}
