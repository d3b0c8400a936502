//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measured values; tolerances and runtime limits are pinned below.
//! The process exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatpca::covariance::{covariance_objective, estimate_from_phi};
use spatpca::linalg::{
    max_principal_angle, orthonormality_defect, polar_factor, sample_covariance, select_rows, sym_eigen,
};
use spatpca::simharness::{generate, generate_on, run_experiment, ExperimentSpec, LossRecord};
use spatpca::solver::{admm_step, fit, fit_lasso_variant, soft_threshold_scalar, AdmmState, SolverConfig};
use spatpca::tps::{build_penalty, evaluate, solve_coefficients};
use spatpca::tuning::{tune_and_fit, zero_plus_log_spaced, GammaRange, Method, PipelineOptions, TuningGrid};
use spatpca::SpatialDomain;

const PCA_ANGLE: f64 = 1e-4;
const COV_OBJECTIVE_TOL: f64 = 1e-5;
const TPS_OE: f64 = 1e-8;
const TPS_AFFINE: f64 = 1e-10;
const TPS_ENERGY_REL: f64 = 1e-8;
const TPS_INTERP: f64 = 1e-8;
const VARIANT_ANGLE: f64 = 1e-3;
const PHI_WIN_RATE: f64 = 0.8;
const COV_WIN_RATE: f64 = 0.7;
const PROPERTY_CASES: u32 = 1000;
const Q_ORTHO: f64 = 1e-12;
const HELD_OUT_WIN_RATE: f64 = 0.7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_data(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    let scales: Vec<f64> = (0..p).map(|j| 1.0 + 4.0 / (1.0 + j as f64)).collect();
    DMatrix::from_fn(n, p, |_, j| rng.random_range(-1.0..1.0) * scales[j])
}

fn random_domain(rng: &mut ChaCha8Rng, p: usize, d: usize) -> SpatialDomain {
    SpatialDomain::new(DMatrix::from_fn(p, d, |_, _| rng.random_range(0.0..1.0))).unwrap()
}

fn pca_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let y = random_data(&mut rng, 50, 30);
        let penalty = build_penalty(&random_domain(&mut rng, 30, 2)).unwrap();
        let eig = sym_eigen(&sample_covariance(&y)).unwrap();
        for k in [1, 3] {
            let basis = fit(&y, &penalty, &SolverConfig::new(0.0, 0.0, k), None).unwrap();
            let top = eig.vectors.columns(0, k).into_owned();
            worst = worst.max(max_principal_angle(&top, &basis.phi));
        }
    }
    outcome(worst < PCA_ANGLE, format!("max angle {worst:.2e} rad over 20 datasets x K in {{1,3}} (tol {PCA_ANGLE:e})"))
}

fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m).unwrap();
    &e.vectors * DMatrix::from_diagonal(&e.values.map(|v| v.max(0.0))) * e.vectors.transpose()
}

/// Accelerated projected gradient over `σ² ≥ 0`, `Λ ⪰ 0`.
fn fista(s: &DMatrix<f64>, phi: &DMatrix<f64>, gamma: f64) -> (DMatrix<f64>, f64) {
    let (p, k) = phi.shape();
    let step = 1.0 / (p as f64 + 2.0 * (p as f64).sqrt() + 1.0);
    let (mut lam, mut sig) = (DMatrix::zeros(k, k), 0.0);
    let (mut y_lam, mut y_sig) = (lam.clone(), sig);
    let mut t: f64 = 1.0;
    for _ in 0..40_000 {
        let r = s - phi * &y_lam * phi.transpose() - DMatrix::identity(p, p) * y_sig;
        let g_lam = -(phi.transpose() * &r * phi) + DMatrix::identity(k, k) * gamma;
        let next_lam = project_psd(&(&y_lam - g_lam * step));
        let next_sig = (y_sig + step * r.trace()).max(0.0);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        y_lam = &next_lam + (&next_lam - &lam) * mom;
        y_sig = next_sig + (next_sig - sig) * mom;
        lam = next_lam;
        sig = next_sig;
        t = t_next;
    }
    (lam, sig)
}

fn covariance_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_gap, mut worst_excess) = (0.0_f64, f64::NEG_INFINITY);
    for _ in 0..50 {
        let p = rng.random_range(2..=8);
        let k = rng.random_range(1..=3.min(p - 1));
        let n = p + rng.random_range(0..10);
        let x = random_data(&mut rng, n, p);
        let s = x.transpose() * &x / n as f64;
        let phi = polar_factor(&DMatrix::from_fn(p, k, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let top = sym_eigen(&(phi.transpose() * &s * &phi)).unwrap().values[0];
        let gamma = match rng.random_range(0..4) {
            0 => 0.0,
            1 => top * 1.5,
            _ => rng.random_range(0.0..top),
        };
        let est = estimate_from_phi(&s, &phi, gamma).unwrap();
        let ours = covariance_objective(&s, &phi, &est.lambda, est.sigma2, gamma);
        let (lam, sig) = fista(&s, &phi, gamma);
        let oracle = covariance_objective(&s, &phi, &lam, sig, gamma);
        worst_gap = worst_gap.max((ours - oracle).abs());
        worst_excess = worst_excess.max(ours - oracle);
    }
    outcome(
        worst_gap <= COV_OBJECTIVE_TOL && worst_excess <= COV_OBJECTIVE_TOL,
        format!("50 instances: max |closed - oracle| {worst_gap:.2e}, max excess {worst_excess:.2e} (tol {COV_OBJECTIVE_TOL:e})"),
    )
}

/// Uniform draws on `[-2, 2]^d`, rejecting any site closer than `0.1` to an
/// earlier one. The absolute tolerances assume separated sites: in one
/// dimension `Ω` grows like `h^-3` in the smallest gap `h`.
fn separated_sites(rng: &mut ChaCha8Rng, p: usize, d: usize) -> DMatrix<f64> {
    let mut sites: Vec<Vec<f64>> = Vec::with_capacity(p);
    while sites.len() < p {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let far = sites
            .iter()
            .all(|s| s.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= 0.1);
        if far {
            sites.push(x);
        }
    }
    DMatrix::from_fn(p, d, |i, j| sites[i][j])
}

fn tps_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut oe, mut affine, mut energy, mut interp) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for d in 1..=3usize {
        let p = 10 + 5 * d;
        let locs = separated_sites(&mut rng, p, d);
        let domain = SpatialDomain::new(locs.clone()).unwrap();
        let penalty = build_penalty(&domain).unwrap();
        oe = oe.max((penalty.omega() * penalty.e_matrix()).amax());

        let lin = DVector::from_fn(p, |i, _| 0.25 + locs.row(i).sum() * 0.75);
        let coeffs = solve_coefficients(&penalty, &lin).unwrap();
        let q = DMatrix::from_fn(7, d, |_, _| rng.random_range(-3.0..3.0));
        let vals = evaluate(&coeffs, &domain, &q).unwrap();
        for i in 0..7 {
            affine = affine.max((vals[i] - (0.25 + q.row(i).sum() * 0.75)).abs());
        }

        for _ in 0..20 {
            let v = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let c = solve_coefficients(&penalty, &v).unwrap();
            let quad = penalty.roughness(&v);
            energy = energy.max((quad - c.bending_energy(&penalty)).abs() / quad.abs().max(1e-300));
            interp = interp.max((evaluate(&c, &domain, &locs).unwrap() - &v).amax());
        }
    }
    outcome(
        oe < TPS_OE && affine < TPS_AFFINE && energy < TPS_ENERGY_REL && interp < TPS_INTERP,
        format!("|OE| {oe:.1e}, affine {affine:.1e}, v'Ov vs a'Ga rel {energy:.1e}, node interp {interp:.1e}"),
    )
}

fn variant_consistency() -> Outcome {
    let spec = ExperimentSpec::one_dimensional([9.0, 4.0], vec![2], 1, 7);
    let y = generate(&spec, 0).unwrap().y;
    let penalty = build_penalty(&spec.domain.build(1).unwrap()).unwrap();
    let angle = |t1: f64, t2: f64| {
        let cfg = SolverConfig::new(t1, t2, 2);
        let a = fit(&y, &penalty, &cfg, None).unwrap();
        let b = fit_lasso_variant(&y, &penalty, &cfg, None).unwrap();
        max_principal_angle(&a.phi, &b.phi)
    };
    let gated = [(0.0, 0.0), (10.0, 0.0), (100.0, 0.0), (0.0, 1.0), (10.0, 1.0)];
    let mut parts = Vec::new();
    let mut worst = 0.0_f64;
    for (t1, t2) in gated {
        let a = angle(t1, t2);
        worst = worst.max(a);
        parts.push(format!("({t1},{t2}) {a:.1e}"));
    }
    let info: Vec<String> = [(0.0, 10.0), (10.0, 10.0)]
        .iter()
        .map(|&(t1, t2)| format!("({t1},{t2}) {:.1e}", angle(t1, t2)))
        .collect();
    outcome(
        worst < VARIANT_ANGLE,
        format!("angles {} (tol {VARIANT_ANGLE:e}); ungated larger tau2: {}", parts.join(", "), info.join(", ")),
    )
}

fn win_rate(records: &[LossRecord], better: Method, worse: Method, cov: bool) -> (usize, usize) {
    let loss = |r: &LossRecord| if cov { r.loss_cov } else { r.loss_phi };
    let mut wins = 0;
    let mut total = 0;
    for b in records.iter().filter(|r| r.method == better) {
        let w = records.iter().find(|r| r.method == worse && r.replicate == b.replicate && r.k == b.k).unwrap();
        total += 1;
        if loss(b) < loss(w) {
            wins += 1;
        }
    }
    (wins, total)
}

fn simulation_replication() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (eig, cov, other, rate) in [
        ([9.0, 0.0], false, Method::Pca, PHI_WIN_RATE),
        ([1.0, 0.0], false, Method::Pca, PHI_WIN_RATE),
        ([9.0, 4.0], true, Method::SparseOnly, COV_WIN_RATE),
    ] {
        let mut spec = ExperimentSpec::one_dimensional(eig, vec![2], 20, 2024);
        spec.methods = vec![other, Method::Spatpca];
        let records = run_experiment(&spec).unwrap();
        let (w, n) = win_rate(&records, Method::Spatpca, other, cov);
        pass &= w as f64 >= rate * n as f64;
        let loss = if cov { "lossCov" } else { "lossPhi" };
        parts.push(format!("{eig:?} {loss} vs {}: {w}/{n}", other.name()));
    }
    outcome(pass, format!("{} (need {PHI_WIN_RATE} / {COV_WIN_RATE})", parts.join("; ")))
}

fn update_laws() -> Outcome {
    // A runner keeps its case count across runs, so each law gets its own.
    let runner = || {
        TestRunner::new(Config {
            cases: PROPERTY_CASES,
            failure_persistence: None,
            ..Config::default()
        })
    };
    let admm_cases = std::cell::Cell::new(0_u32);
    let mut failures = Vec::new();

    let res = runner().run(&(-1e3..1e3f64, -1e3..1e3f64, 0.0..50.0f64), |(a, b, tau)| {
        let d = (soft_threshold_scalar(a, tau) - soft_threshold_scalar(b, tau)).abs();
        prop_assert!(d <= (a - b).abs() + 1e-12);
        Ok(())
    });
    if let Err(e) = res {
        failures.push(format!("nonexpansive: {e}"));
    }
    let res = runner().run(&(0.0..50.0f64, -1.0..=1.0f64), |(tau, frac)| {
        prop_assert_eq!(soft_threshold_scalar(frac * tau, tau), 0.0);
        Ok(())
    });
    if let Err(e) = res {
        failures.push(format!("dead zone: {e}"));
    }
    let res = runner().run(&(-1e6..1e6f64), |v| {
        prop_assert_eq!(soft_threshold_scalar(v, 0.0), v);
        Ok(())
    });
    if let Err(e) = res {
        failures.push(format!("identity: {e}"));
    }

    let domain = SpatialDomain::equispaced_1d(0.0, 1.0, 8).unwrap();
    let penalty = build_penalty(&domain).unwrap();
    let mat = |r: usize, c: usize| prop::collection::vec(-10.0..10.0f64, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v));
    let strategy = (mat(12, 8), mat(8, 2), mat(8, 2), mat(8, 2), 0.0..5.0f64, 0.0..5.0f64);
    let worst_q = std::cell::Cell::new(0.0_f64);
    let res = runner().run(&strategy, |(y, start, g1, g2, tau1, tau2)| {
        prop_assume!(start.clone().singular_values().min() > 1e-3);
        let lmax = (y.transpose() * &y).symmetric_eigenvalues().max();
        let rho = 10.0 * lmax.max(1.0);
        let mut state = AdmmState::from_start(&polar_factor(&start).unwrap(), rho);
        state.gamma1 = g1;
        state.gamma2 = g2;
        let next = admm_step(&state, &y, &penalty, &SolverConfig::new(tau1, tau2, 2)).unwrap();
        admm_cases.set(admm_cases.get() + 1);
        let defect = orthonormality_defect(&next.q);
        worst_q.set(worst_q.get().max(defect));
        prop_assert!(defect < Q_ORTHO);
        let want1 = &state.gamma1 + (&next.phi - &next.q) * rho;
        let want2 = &state.gamma2 + (&next.phi - &next.r) * rho;
        let scale = 1.0 + want1.amax().max(want2.amax());
        prop_assert!((next.gamma1 - want1).amax() <= 1e-12 * scale);
        prop_assert!((next.gamma2 - want2).amax() <= 1e-12 * scale);
        Ok(())
    });
    if let Err(e) = res {
        failures.push(format!("ADMM step: {e}"));
    }
    outcome(
        failures.is_empty() && admm_cases.get() >= PROPERTY_CASES,
        if failures.is_empty() {
            format!(
                "{PROPERTY_CASES} cases per law ({} ADMM steps checked); max |Q'Q - I| {:.1e} (tol {Q_ORTHO:e})",
                admm_cases.get(),
                worst_q.get()
            )
        } else {
            failures.join("; ")
        },
    )
}

fn determinism() -> Outcome {
    use common::{code, experiment_files, run, s};
    let dir = tempfile::tempdir().unwrap();
    let (data, locs) = experiment_files(dir.path(), [9.0, 4.0], 0);
    let mut fits = Vec::new();
    for name in ["fit1.json", "fit2.json"] {
        let path = dir.path().join(name);
        let out = run(&["fit", "--data", s(&data), "--locations", s(&locs), "--k", "2", "--seed", "3", "--out", s(&path)]);
        if code(&out) != 0 {
            return outcome(false, format!("fit failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        fits.push(std::fs::read(&path).unwrap());
    }
    let spec = dir.path().join("spec.json");
    let mut sim_spec = ExperimentSpec::one_dimensional([9.0, 4.0], vec![1, 2], 3, 5);
    sim_spec.methods = vec![Method::Pca, Method::SmoothOnly, Method::Spatpca];
    std::fs::write(&spec, serde_json::to_string(&sim_spec).unwrap()).unwrap();
    let mut sims = Vec::new();
    for name in ["sim1", "sim2"] {
        let out_dir = dir.path().join(name);
        let out = run(&["simulate", "--spec", s(&spec), "--out", s(&out_dir)]);
        if code(&out) != 0 {
            return outcome(false, format!("simulate failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        let mut bytes = std::fs::read(out_dir.join("records.csv")).unwrap();
        bytes.extend(std::fs::read(out_dir.join("summary.json")).unwrap());
        sims.push(bytes);
    }
    let same_fit = fits[0] == fits[1];
    let same_sim = sims[0] == sims[1];
    outcome(
        same_fit && same_sim,
        format!("fit outputs identical: {same_fit} ({} bytes); simulate outputs identical: {same_sim} ({} bytes)", fits[0].len(), sims[0].len()),
    )
}

/// Two planted eigenfunctions on a 20 x 20 grid with the large score
/// variances of the real-data mimic, 60 training and 60 validation rows.
fn held_out_covariance() -> Outcome {
    let domain = SpatialDomain::regular_grid_2d(-5.0, 5.0, 20).unwrap();
    let penalty = build_penalty(&domain).unwrap();
    let grid = TuningGrid {
        tau1_values: zero_plus_log_spaced(1.0, 1e3, 5),
        tau2_values: zero_plus_log_spaced(1.0, 1e3, 10),
        gamma_range: GammaRange::RelativeToTop(1e-3),
        ..TuningGrid::default()
    };
    let train_rows: Vec<usize> = (0..60).collect();
    let valid_rows: Vec<usize> = (60..120).collect();
    let mut wins = 0;
    let mut parts = Vec::new();
    for rep in 0..10 {
        let real = generate_on(&domain, 120, [101.7, 17.1], 8, rep).unwrap();
        let train = select_rows(&real.y, &train_rows);
        let sv = sample_covariance(&select_rows(&real.y, &valid_rows));
        let sse = |method: Method| {
            let opts = PipelineOptions {
                base: SolverConfig::new(0.0, 0.0, 5),
                grid: grid.clone(),
                method,
                fixed_tau: None,
                fixed_gamma: None,
                seed: rep as u64,
            };
            let fitted = tune_and_fit(&train, &penalty, &opts).unwrap();
            (fitted.covariance.observation_covariance() - &sv).norm_squared()
        };
        let (pca, spat) = (sse(Method::Pca), sse(Method::Spatpca));
        if spat < pca {
            wins += 1;
        }
        parts.push(format!("{:.0}/{:.0}", spat, pca));
    }
    outcome(
        wins as f64 >= HELD_OUT_WIN_RATE * 10.0,
        format!("SpatPCA below PCA in {wins}/10 (need {HELD_OUT_WIN_RATE}); SSE spatpca/pca: {}", parts.join(" ")),
    )
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("PCA reduction", Duration::from_secs(10), pca_reduction),
        ("closed-form covariance vs numerical minimizer", Duration::from_secs(60), covariance_oracle),
        ("thin-plate spline penalty", Duration::from_secs(5), tps_correctness),
        ("ADMM variant consistency", Duration::from_secs(60), variant_consistency),
        ("1D simulation trends", Duration::from_secs(15 * 60), simulation_replication),
        ("soft-threshold and update laws", Duration::from_secs(5), update_laws),
        ("CLI determinism", Duration::from_secs(120), determinism),
        ("held-out covariance SSE, 2D synthetic", Duration::from_secs(30 * 60), held_out_covariance),
    ];
    // `ACCEPTANCE_ONLY=3,6` runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} - {name}: {} [{:.1}s, limit {}s{}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
