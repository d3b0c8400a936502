//! M-fold cross-validation for the smoothness/sparseness weights and for the
//! covariance shrinkage parameter.
//!
//! Folds always split observations (rows of `Y`), never sites.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate_from_phi, estimate_parameters, CovarianceModel, SampleCovariance};
use crate::error::{Result, SpatError};
use crate::linalg::{log_spaced, sample_covariance, select_rows, sym_eigen, symmetrize};
use crate::solver::{fit_prepared, DataMatrix, EigenBasis, Gram, SolverConfig, SpectralSystem};
use crate::tps::PenaltyOperator;

/// Balanced assignment of observations to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FoldAssignment {
    /// Fold index (`0..m`) of every observation.
    pub assignment: Vec<usize>,
    pub m: usize,
}

impl FoldAssignment {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn validation_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn training_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.m];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded random partition of `0..n` into `m` folds whose sizes differ by at most one.
pub fn partition_folds(n: usize, m: usize, seed: u64) -> Result<FoldAssignment> {
    if m < 2 || m > n {
        return Err(SpatError::Argument(format!(
            "fold count must satisfy 2 <= m <= n, got m={m}, n={n}"
        )));
    }
    let mut assignment: Vec<usize> = (0..n).map(|i| i % m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assignment.shuffle(&mut rng);
    Ok(FoldAssignment { assignment, m })
}

/// How the `γ` candidates are laid out relative to `d̂_1`, the largest
/// eigenvalue of `Φ̂' S Φ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GammaRange {
    /// `0` plus log-spaced values from 1 to `d̂_1`.
    #[default]
    UnitToTop,
    /// `0` plus log-spaced values from `d̂_1 * ratio` to `d̂_1`.
    RelativeToTop(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TuningGrid {
    pub tau1_values: Vec<f64>,
    pub tau2_values: Vec<f64>,
    pub gamma_value_count: usize,
    pub gamma_range: GammaRange,
    pub folds: usize,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            tau1_values: zero_plus_log_spaced(1.0, 1e3, 10),
            tau2_values: zero_plus_log_spaced(1.0, 1e3, 30),
            gamma_value_count: 11,
            gamma_range: GammaRange::UnitToTop,
            folds: 5,
        }
    }
}

impl TuningGrid {
    /// Smoothing-only restriction (`τ2 = 0`).
    pub fn smooth_only(&self) -> Self {
        Self {
            tau2_values: vec![0.0],
            ..self.clone()
        }
    }

    /// Sparseness-only restriction (`τ1 = 0`).
    pub fn sparse_only(&self) -> Self {
        Self {
            tau1_values: vec![0.0],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in [("tau1", &self.tau1_values), ("tau2", &self.tau2_values)] {
            if values.is_empty() {
                return Err(SpatError::Argument(format!("{name} grid is empty")));
            }
            if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(SpatError::Argument(format!("{name} grid has negative or non-finite values")));
            }
            if values.windows(2).any(|w| w[0] > w[1]) {
                return Err(SpatError::Argument(format!("{name} grid must be sorted ascending")));
            }
        }
        if self.gamma_value_count == 0 {
            return Err(SpatError::Argument("gamma grid needs at least one value".into()));
        }
        if let GammaRange::RelativeToTop(r) = self.gamma_range {
            if !(r > 0.0 && r < 1.0) {
                return Err(SpatError::Argument(format!("relative gamma range must be in (0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

/// `0` followed by `count` log-spaced values in `[lo, hi]`.
pub fn zero_plus_log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let mut v = vec![0.0];
    v.extend(log_spaced(lo, hi, count));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TauSelection {
    pub tau1: f64,
    pub tau2: f64,
}

/// CV surface over the `(τ1, τ2)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TauCvReport {
    pub tau1_values: Vec<f64>,
    pub tau2_values: Vec<f64>,
    /// `criterion[i][j]` is the CV value at `(tau1_values[i], tau2_values[j])`;
    /// NaN where a fold fit failed (`null` in JSON).
    #[serde(with = "nan_as_null")]
    pub criterion: Vec<Vec<f64>>,
    /// Whether every fold fit at the grid point converged.
    pub converged: Vec<Vec<bool>>,
    pub selected: TauSelection,
    pub folds: FoldAssignment,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Vec<Option<f64>>> = v
            .iter()
            .map(|row| row.iter().map(|x| if x.is_nan() { None } else { Some(*x) }).collect())
            .collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let opt = Vec::<Vec<Option<f64>>>::deserialize(d)?;
        Ok(opt
            .into_iter()
            .map(|row| row.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GammaCvReport {
    pub gamma_values: Vec<f64>,
    pub criterion: Vec<f64>,
    pub selected: f64,
    pub d1: f64,
    pub folds: FoldAssignment,
}

fn check_folds(y: &DataMatrix, folds: &FoldAssignment) -> Result<()> {
    if folds.n() != y.nrows() {
        return Err(SpatError::Shape(format!(
            "fold assignment covers {} rows, data has {}",
            folds.n(),
            y.nrows()
        )));
    }
    Ok(())
}

/// `‖Y - Y Φ Φ'‖²_F`.
pub fn projection_residual(y: &DMatrix<f64>, phi: &DMatrix<f64>) -> f64 {
    (y - y * phi * phi.transpose()).norm_squared()
}

struct FoldData {
    gram: Gram,
    validation: DMatrix<f64>,
}

/// Fits along the ascending `τ2` path for one `τ1`, warm-starting each fit
/// from the previous one. The first fit starts from the leading eigenvectors
/// of `Y'Y - τ1 Ω`.
pub fn fit_tau2_path(
    gram: &Gram,
    system: &SpectralSystem,
    penalty: &PenaltyOperator,
    base: &SolverConfig,
    tau2_values: &[f64],
) -> Vec<Result<EigenBasis>> {
    let mut out = Vec::with_capacity(tau2_values.len());
    let mut warm: Option<DMatrix<f64>> = None;
    for &tau2 in tau2_values {
        let cfg = base.with_tuning(system.tau1(), tau2);
        let res = fit_prepared(gram, system, penalty, &cfg, warm.as_ref());
        if let Ok(basis) = &res {
            warm = Some(basis.phi.clone());
        }
        out.push(res);
    }
    out
}

/// Cross-validated residual sum of squares over the `(τ1, τ2)` grid.
pub fn cv_tau(
    y: &DataMatrix,
    penalty: &PenaltyOperator,
    base: &SolverConfig,
    grid: &TuningGrid,
    folds: &FoldAssignment,
) -> Result<TauCvReport> {
    grid.validate()?;
    check_folds(y, folds)?;

    let fold_data: Vec<FoldData> = (0..folds.m)
        .into_par_iter()
        .map(|m| {
            let train = select_rows(y, &folds.training_rows(m));
            Ok(FoldData {
                gram: Gram::new(&train)?,
                validation: select_rows(y, &folds.validation_rows(m)),
            })
        })
        .collect::<Result<_>>()?;

    let tasks: Vec<(usize, usize)> = (0..folds.m)
        .flat_map(|m| (0..grid.tau1_values.len()).map(move |i| (m, i)))
        .collect();

    // (fold, tau1) -> per-tau2 (residual, converged)
    let results: Vec<Vec<Option<(f64, bool)>>> = tasks
        .par_iter()
        .map(|&(m, i)| {
            let fd = &fold_data[m];
            let system = match SpectralSystem::new(&fd.gram, penalty, grid.tau1_values[i]) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("fold {m}, tau1={}: {e}", grid.tau1_values[i]);
                    return vec![None; grid.tau2_values.len()];
                }
            };
            fit_tau2_path(&fd.gram, &system, penalty, base, &grid.tau2_values)
                .into_iter()
                .map(|res| match res {
                    Ok(basis) => Some((projection_residual(&fd.validation, &basis.phi), basis.converged)),
                    Err(e) => {
                        log::warn!("fold {m}, tau1={}: {e}", grid.tau1_values[i]);
                        None
                    }
                })
                .collect()
        })
        .collect();

    let (n1, n2) = (grid.tau1_values.len(), grid.tau2_values.len());
    let mut criterion = vec![vec![0.0; n2]; n1];
    let mut converged = vec![vec![true; n2]; n1];
    for (t, &(_, i)) in tasks.iter().enumerate() {
        for j in 0..n2 {
            match results[t][j] {
                Some((rss, conv)) => {
                    criterion[i][j] += rss / folds.m as f64;
                    converged[i][j] &= conv;
                }
                None => {
                    criterion[i][j] = f64::NAN;
                    converged[i][j] = false;
                }
            }
        }
    }

    let mut best: Option<(usize, usize)> = None;
    for i in 0..n1 {
        for j in 0..n2 {
            let v = criterion[i][j];
            if v.is_nan() {
                continue;
            }
            if best.is_none_or(|(bi, bj)| v < criterion[bi][bj]) {
                best = Some((i, j));
            }
        }
    }
    let (bi, bj) = best.ok_or_else(|| SpatError::Numerical("every grid point failed in cross-validation".into()))?;

    Ok(TauCvReport {
        tau1_values: grid.tau1_values.clone(),
        tau2_values: grid.tau2_values.clone(),
        criterion,
        converged,
        selected: TauSelection {
            tau1: grid.tau1_values[bi],
            tau2: grid.tau2_values[bj],
        },
        folds: folds.clone(),
    })
}

/// Candidate `γ` values given `d̂_1`.
pub fn gamma_grid(d1: f64, count: usize, range: GammaRange) -> Vec<f64> {
    if count <= 1 || d1 <= 0.0 {
        return vec![0.0];
    }
    match range {
        GammaRange::UnitToTop => {
            if d1 <= 1.0 {
                vec![0.0, d1]
            } else {
                zero_plus_log_spaced(1.0, d1, count - 1)
            }
        }
        GammaRange::RelativeToTop(ratio) => zero_plus_log_spaced(d1 * ratio, d1, count - 1),
    }
}

/// Largest eigenvalue of `Φ' S Φ`.
pub fn top_projected_variance(s: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_eigen(&symmetrize(&(phi.transpose() * s * phi)))?.values[0])
}

/// Cross-validation of `γ` with `Φ̂` held fixed at the full-data estimate.
pub fn cv_gamma(y: &DataMatrix, basis: &EigenBasis, grid: &TuningGrid, folds: &FoldAssignment) -> Result<GammaCvReport> {
    let gammas = {
        let s = sample_covariance(y);
        let d1 = top_projected_variance(&s, &basis.phi)?;
        (gamma_grid(d1, grid.gamma_value_count, grid.gamma_range), d1)
    };
    cv_gamma_over(y, &basis.phi, &gammas.0, gammas.1, folds)
}

/// [`cv_gamma`] over an explicit candidate list.
pub fn cv_gamma_over(
    y: &DataMatrix,
    phi: &DMatrix<f64>,
    gamma_values: &[f64],
    d1: f64,
    folds: &FoldAssignment,
) -> Result<GammaCvReport> {
    check_folds(y, folds)?;
    if gamma_values.is_empty() {
        return Err(SpatError::Argument("empty gamma grid".into()));
    }
    let p = y.ncols();
    let per_fold: Vec<Vec<f64>> = (0..folds.m)
        .into_par_iter()
        .map(|m| {
            let s_train = sample_covariance(&select_rows(y, &folds.training_rows(m)));
            let s_val = sample_covariance(&select_rows(y, &folds.validation_rows(m)));
            gamma_values
                .iter()
                .map(|&g| {
                    let est = estimate_from_phi(&s_train, phi, g)?;
                    let fitted = phi * &est.lambda * phi.transpose() + DMatrix::identity(p, p) * est.sigma2;
                    Ok((s_val.clone() - fitted).norm_squared())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let criterion: Vec<f64> = (0..gamma_values.len())
        .map(|g| per_fold.iter().map(|f| f[g]).sum::<f64>() / folds.m as f64)
        .collect();
    let mut best = 0;
    for (g, &v) in criterion.iter().enumerate() {
        if v < criterion[best] {
            best = g;
        }
    }
    Ok(GammaCvReport {
        gamma_values: gamma_values.to_vec(),
        criterion,
        selected: gamma_values[best],
        d1,
        folds: folds.clone(),
    })
}

/// Full-data fit at the selected weights, following the warm-started `τ2`
/// path of the grid up to the selected value.
pub fn refit_selected(
    gram: &Gram,
    penalty: &PenaltyOperator,
    base: &SolverConfig,
    grid: &TuningGrid,
    selected: TauSelection,
) -> Result<EigenBasis> {
    let system = SpectralSystem::new(gram, penalty, selected.tau1)?;
    let mut path: Vec<f64> = grid.tau2_values.iter().cloned().filter(|&t| t < selected.tau2).collect();
    path.push(selected.tau2);
    fit_tau2_path(gram, &system, penalty, base, &path)
        .pop()
        .expect("path is nonempty")
}

/// How the smoothness and sparseness weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// `τ1 = τ2 = 0`, no tuning.
    Pca,
    /// Cross-validated `τ1`, `τ2 = 0`.
    SmoothOnly,
    /// `τ1 = 0`, cross-validated `τ2`.
    SparseOnly,
    /// Both weights cross-validated.
    Spatpca,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pca, Method::SmoothOnly, Method::SparseOnly, Method::Spatpca];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::SmoothOnly => "smooth-only",
            Method::SparseOnly => "sparse-only",
            Method::Spatpca => "spatpca",
        }
    }

    pub fn restrict(&self, grid: &TuningGrid) -> TuningGrid {
        match self {
            Method::Pca => TuningGrid {
                tau1_values: vec![0.0],
                tau2_values: vec![0.0],
                ..grid.clone()
            },
            Method::SmoothOnly => grid.smooth_only(),
            Method::SparseOnly => grid.sparse_only(),
            Method::Spatpca => grid.clone(),
        }
    }
}

/// Output of [`tune_and_fit`].
#[derive(Debug, Clone)]
pub struct TunedFit {
    pub basis: EigenBasis,
    pub covariance: CovarianceModel,
    /// `None` when the weights were fixed.
    pub tau_report: Option<TauCvReport>,
    /// `None` when `γ` was fixed.
    pub gamma_report: Option<GammaCvReport>,
}

/// Fixed or cross-validated choices for the full pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub base: SolverConfig,
    pub grid: TuningGrid,
    pub method: Method,
    /// Overrides cross-validation of `(τ1, τ2)`.
    pub fixed_tau: Option<(f64, f64)>,
    /// Overrides cross-validation of `γ`.
    pub fixed_gamma: Option<f64>,
    pub seed: u64,
}

/// Selects `(τ1, τ2)`, fits on all rows, selects `γ`, and estimates the
/// covariance parameters.
///
/// With cross-validated weights the final fit follows the same warm-started
/// `τ2` path that produced the CV surface, stopping at the selected value.
pub fn tune_and_fit(y: &DataMatrix, penalty: &PenaltyOperator, opts: &PipelineOptions) -> Result<TunedFit> {
    let grid = opts.method.restrict(&opts.grid);
    grid.validate()?;
    let needs_folds = opts.fixed_gamma.is_none() || (opts.fixed_tau.is_none() && opts.method != Method::Pca);
    let folds = if needs_folds {
        Some(partition_folds(y.nrows(), grid.folds, opts.seed)?)
    } else {
        None
    };

    let gram = Gram::new(y)?;
    let (basis, tau_report) = match (opts.fixed_tau, opts.method) {
        (Some((t1, t2)), _) => {
            let system = SpectralSystem::new(&gram, penalty, t1)?;
            let cfg = opts.base.with_tuning(t1, t2);
            (fit_prepared(&gram, &system, penalty, &cfg, None)?, None)
        }
        (None, Method::Pca) => {
            let system = SpectralSystem::new(&gram, penalty, 0.0)?;
            let cfg = opts.base.with_tuning(0.0, 0.0);
            (fit_prepared(&gram, &system, penalty, &cfg, None)?, None)
        }
        (None, _) => {
            let folds = folds.as_ref().expect("folds are built when tuning");
            let report = cv_tau(y, penalty, &opts.base, &grid, folds)?;
            let basis = refit_selected(&gram, penalty, &opts.base, &grid, report.selected)?;
            (basis, Some(report))
        }
    };

    let s = SampleCovariance::from_data(y)?;
    let (gamma, gamma_report) = match opts.fixed_gamma {
        Some(g) => (g, None),
        None => {
            let report = cv_gamma(y, &basis, &grid, folds.as_ref().expect("folds are built when tuning"))?;
            (report.selected, Some(report))
        }
    };
    let covariance = estimate_parameters(&s, &basis, gamma)?;
    Ok(TunedFit {
        basis,
        covariance,
        tau_report,
        gamma_report,
    })
}
