//! Synthetic experiments: two Gaussian-shaped eigenfunctions plus white noise,
//! fitted by each method and scored against the truth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpatError};
use crate::solver::{DataMatrix, SolverConfig, Variant};
use crate::tps::{build_penalty, PenaltyOperator, SpatialDomain};
use crate::tuning::{tune_and_fit, Method, PipelineOptions, TuningGrid};

/// Nodes of a simulation design: `count` equispaced points per axis on
/// `[lo, hi]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DomainSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl DomainSpec {
    pub fn build(&self, d: usize) -> Result<SpatialDomain> {
        match d {
            1 => SpatialDomain::equispaced_1d(self.lo, self.hi, self.count),
            2 => SpatialDomain::regular_grid_2d(self.lo, self.hi, self.count),
            _ => Err(SpatError::Dimension(d)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentSpec {
    pub d: usize,
    pub n: usize,
    pub domain: DomainSpec,
    /// `(λ1, λ2)`.
    pub eigenvalues: [f64; 2],
    pub k_fit: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Candidate weights; the default grid when absent.
    #[serde(default)]
    pub grid: Option<TuningGrid>,
    #[serde(default)]
    pub variant: Variant,
}

impl ExperimentSpec {
    /// 50 equispaced nodes on `[-5, 5]`, `n = 100`.
    pub fn one_dimensional(eigenvalues: [f64; 2], k_fit: Vec<usize>, replicates: usize, seed: u64) -> Self {
        Self {
            d: 1,
            n: 100,
            domain: DomainSpec {
                lo: -5.0,
                hi: 5.0,
                count: 50,
            },
            eigenvalues,
            k_fit,
            replicates,
            seed,
            methods: Method::ALL.to_vec(),
            grid: None,
            variant: Variant::ClosedForm,
        }
    }

    /// `20 x 20` grid on `[-5, 5]^2`, `n = 100`.
    pub fn two_dimensional(eigenvalues: [f64; 2], k_fit: Vec<usize>, replicates: usize, seed: u64) -> Self {
        Self {
            d: 2,
            domain: DomainSpec {
                lo: -5.0,
                hi: 5.0,
                count: 20,
            },
            ..Self::one_dimensional(eigenvalues, k_fit, replicates, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.d, 1 | 2) {
            return Err(SpatError::Dimension(self.d));
        }
        let [l1, l2] = self.eigenvalues;
        if !(l1 >= l2 && l2 >= 0.0 && l1.is_finite()) {
            return Err(SpatError::Argument(format!("eigenvalues must satisfy l1 >= l2 >= 0, got ({l1}, {l2})")));
        }
        if self.replicates == 0 {
            return Err(SpatError::Argument("replicates must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(SpatError::Argument("n must be at least 1".into()));
        }
        if self.methods.is_empty() || self.k_fit.is_empty() {
            return Err(SpatError::Argument("methods and kFit must be nonempty".into()));
        }
        if !(self.domain.lo < self.domain.hi) {
            return Err(SpatError::Argument("domain needs lo < hi".into()));
        }
        let p = self.domain.count.pow(self.d as u32);
        if let Some(&k) = self.k_fit.iter().find(|&&k| k == 0 || k >= p || k > self.n) {
            return Err(SpatError::Argument(format!("K={k} is invalid for p={p}, n={}", self.n)));
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }

    pub fn tuning_grid(&self) -> TuningGrid {
        self.grid.clone().unwrap_or_default()
    }
}

/// Unit-norm discretizations of `exp(-|x|²)` and `(Π x_j) exp(-|x|²)` at the nodes.
pub fn true_eigenfunctions(domain: &SpatialDomain) -> Result<DMatrix<f64>> {
    if !matches!(domain.dim(), 1 | 2) {
        return Err(SpatError::Dimension(domain.dim()));
    }
    let locs = domain.locations();
    let p = domain.len();
    let mut phi = DMatrix::zeros(p, 2);
    for i in 0..p {
        let row = locs.row(i);
        let envelope = (-row.iter().map(|x| x * x).sum::<f64>()).exp();
        phi[(i, 0)] = envelope;
        phi[(i, 1)] = row.iter().product::<f64>() * envelope;
    }
    for mut col in phi.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    Ok(phi)
}

/// One simulated dataset with its latent components.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub y: DataMatrix,
    /// `n x 2` latent scores.
    pub xi: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub eigenvalues: [f64; 2],
}

impl Realization {
    /// `Φ diag(λ) Φ'`.
    pub fn true_covariance(&self) -> DMatrix<f64> {
        let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues));
        &self.phi * lambda * self.phi.transpose()
    }

    /// `ξ Φ'`, the noiseless signal.
    pub fn signal(&self) -> DMatrix<f64> {
        &self.xi * self.phi.transpose()
    }
}

const STREAM_XI: u64 = 0;
const STREAM_EPS: u64 = 1;

fn stream_rng(seed: u64, replicate: usize, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * replicate as u64 + role);
    rng
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Row-major fill so a prefix of rows does not depend on `rows`.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// `Y_i = Φ ξ_i + ε_i` with independent random streams per replicate for
/// the scores and the noise.
pub fn generate_on(
    domain: &SpatialDomain,
    n: usize,
    eigenvalues: [f64; 2],
    seed: u64,
    replicate: usize,
) -> Result<Realization> {
    let phi = true_eigenfunctions(domain)?;
    let mut xi = normal_matrix(&mut stream_rng(seed, replicate, STREAM_XI), n, 2);
    for (j, l) in eigenvalues.iter().enumerate() {
        xi.column_mut(j).scale_mut(l.sqrt());
    }
    let eps = normal_matrix(&mut stream_rng(seed, replicate, STREAM_EPS), n, domain.len());
    let y = &xi * phi.transpose() + eps;
    Ok(Realization { y, xi, phi, eigenvalues })
}

pub fn generate(spec: &ExperimentSpec, replicate: usize) -> Result<Realization> {
    spec.validate()?;
    let domain = spec.domain.build(spec.d)?;
    generate_on(&domain, spec.n, spec.eigenvalues, spec.seed, replicate)
}

/// `Σ_i ‖Φ̂ Φ̂' Y_i - Φ ξ_i‖²`.
pub fn loss_phi(phi_hat: &DMatrix<f64>, truth: &Realization) -> Result<f64> {
    let (n, p) = truth.y.shape();
    if phi_hat.nrows() != p || truth.xi.nrows() != n || truth.phi.nrows() != p {
        return Err(SpatError::Shape(format!(
            "basis has {} rows, data is {n}x{p}",
            phi_hat.nrows()
        )));
    }
    let projected = &truth.y * phi_hat * phi_hat.transpose();
    Ok((projected - truth.signal()).norm_squared())
}

/// Squared Frobenius distance between node covariances.
pub fn loss_cov(c_hat: &DMatrix<f64>, c_true: &DMatrix<f64>) -> Result<f64> {
    if c_hat.shape() != c_true.shape() {
        return Err(SpatError::Shape(format!(
            "covariances are {:?} and {:?}",
            c_hat.shape(),
            c_true.shape()
        )));
    }
    Ok((c_hat - c_true).norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectedTuning {
    pub tau1: f64,
    pub tau2: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LossRecord {
    pub method: Method,
    pub eigenvalues: [f64; 2],
    pub k: usize,
    pub replicate: usize,
    /// NaN when the replicate failed.
    pub loss_phi: f64,
    pub loss_cov: f64,
    pub selected_tuning: Option<SelectedTuning>,
    pub converged: bool,
    pub error: Option<String>,
}

fn fit_one(
    realization: &Realization,
    penalty: &PenaltyOperator,
    spec: &ExperimentSpec,
    k: usize,
    method: Method,
    replicate: usize,
) -> Result<(f64, f64, SelectedTuning, bool)> {
    let opts = PipelineOptions {
        base: SolverConfig::new(0.0, 0.0, k).with_variant(spec.variant),
        grid: spec.tuning_grid(),
        method,
        fixed_tau: None,
        fixed_gamma: None,
        seed: spec.seed.wrapping_add(replicate as u64),
    };
    let fitted = tune_and_fit(&realization.y, penalty, &opts)?;
    let phi_hat = &fitted.basis.phi;
    let lp = loss_phi(phi_hat, realization)?;
    let lc = loss_cov(&fitted.covariance.node_covariance(), &realization.true_covariance())?;
    let cfg = &fitted.basis.config;
    let tuning = SelectedTuning {
        tau1: cfg.tau1,
        tau2: cfg.tau2,
        gamma: fitted.covariance.params.gamma,
    };
    Ok((lp, lc, tuning, fitted.basis.converged))
}

/// Every replicate, `K`, and method of one spec. Failed fits are recorded
/// with NaN losses and the error message.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<LossRecord>> {
    spec.validate()?;
    let domain = spec.domain.build(spec.d)?;
    let penalty = build_penalty(&domain)?;
    let per_replicate: Vec<Vec<LossRecord>> = (0..spec.replicates)
        .into_par_iter()
        .map(|rep| {
            let realization = generate_on(&domain, spec.n, spec.eigenvalues, spec.seed, rep);
            let mut out = Vec::new();
            for &k in &spec.k_fit {
                for &method in &spec.methods {
                    let res = realization
                        .as_ref()
                        .map_err(Clone::clone)
                        .and_then(|r| fit_one(r, &penalty, spec, k, method, rep));
                    let record = match res {
                        Ok((lp, lc, tuning, converged)) => LossRecord {
                            method,
                            eigenvalues: spec.eigenvalues,
                            k,
                            replicate: rep,
                            loss_phi: lp,
                            loss_cov: lc,
                            selected_tuning: Some(tuning),
                            converged,
                            error: None,
                        },
                        Err(e) => {
                            log::warn!("replicate {rep}, K={k}, {}: {e}", method.name());
                            LossRecord {
                                method,
                                eigenvalues: spec.eigenvalues,
                                k,
                                replicate: rep,
                                loss_phi: f64::NAN,
                                loss_cov: f64::NAN,
                                selected_tuning: None,
                                converged: false,
                                error: Some(e.to_string()),
                            }
                        }
                    };
                    out.push(record);
                }
            }
            out
        })
        .collect();
    Ok(per_replicate.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quantiles of the finite values; `None` if there are none.
pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |prob: f64| {
        let pos = prob * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(Quartiles {
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryRow {
    pub method: Method,
    pub eigenvalues: [f64; 2],
    pub k: usize,
    pub replicates: usize,
    pub failures: usize,
    pub loss_phi: Option<Quartiles>,
    pub loss_cov: Option<Quartiles>,
}

/// One row per `(eigenvalues, K, method)` in first-appearance order.
pub fn summarize(records: &[LossRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Method, [f64; 2], usize)> = Vec::new();
    for r in records {
        let key = (r.method, r.eigenvalues, r.k);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, eigenvalues, k)| {
            let group: Vec<&LossRecord> = records
                .iter()
                .filter(|r| r.method == method && r.eigenvalues == eigenvalues && r.k == k)
                .collect();
            let lp: Vec<f64> = group.iter().map(|r| r.loss_phi).collect();
            let lc: Vec<f64> = group.iter().map(|r| r.loss_cov).collect();
            SummaryRow {
                method,
                eigenvalues,
                k,
                replicates: group.len(),
                failures: group.iter().filter(|r| r.error.is_some()).count(),
                loss_phi: quartiles(&lp),
                loss_cov: quartiles(&lc),
            }
        })
        .collect()
}
