//! The closed-form covariance estimate against independent numerical
//! minimizers of the same objective.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatpca::covariance::{covariance_objective, estimate_from_phi};
use spatpca::linalg::{polar_factor, sym_eigen};

fn random_instance(rng: &mut ChaCha8Rng, p: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let n = p + rng.random_range(0..10);
    let x = DMatrix::from_fn(n, p, |_, j| rng.random_range(-1.0..1.0) * (1.0 + 2.0 / (j + 1) as f64));
    let s = x.transpose() * &x / n as f64;
    let phi = polar_factor(&DMatrix::from_fn(p, k, |_, _| rng.random_range(-1.0..1.0))).unwrap();
    let top = sym_eigen(&(phi.transpose() * &s * &phi)).unwrap().values[0];
    let gamma = match rng.random_range(0..4) {
        0 => 0.0,
        1 => top * 1.5,
        _ => rng.random_range(0.0..top),
    };
    (s, phi, gamma)
}

fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m).unwrap();
    let clipped = e.values.map(|v| v.max(0.0));
    &e.vectors * DMatrix::from_diagonal(&clipped) * e.vectors.transpose()
}

/// Accelerated projected gradient over `σ² ≥ 0`, `Λ ⪰ 0`. On that set the
/// nuclear norm is the trace, so the objective is smooth plus linear.
fn fista(s: &DMatrix<f64>, phi: &DMatrix<f64>, gamma: f64) -> (DMatrix<f64>, f64) {
    let (p, k) = phi.shape();
    let step = 1.0 / (p as f64 + 2.0 * (p as f64).sqrt() + 1.0);
    let mut lam = DMatrix::zeros(k, k);
    let mut sig = 0.0;
    let (mut y_lam, mut y_sig) = (lam.clone(), sig);
    let mut t: f64 = 1.0;
    let eye_p = DMatrix::<f64>::identity(p, p);
    let eye_k = DMatrix::<f64>::identity(k, k);
    for _ in 0..40_000 {
        let r = s - phi * &y_lam * phi.transpose() - &eye_p * y_sig;
        let g_lam = -(phi.transpose() * &r * phi) + &eye_k * gamma;
        let g_sig = -r.trace();
        let next_lam = project_psd(&(&y_lam - g_lam * step));
        let next_sig = (y_sig - step * g_sig).max(0.0);
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

#[test]
fn closed_form_matches_projected_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let p = rng.random_range(2..=8);
        let k = rng.random_range(1..=3.min(p - 1));
        let (s, phi, gamma) = random_instance(&mut rng, p, k);
        let est = estimate_from_phi(&s, &phi, gamma).unwrap();
        let ours = covariance_objective(&s, &phi, &est.lambda, est.sigma2, gamma);
        let (lam, sig) = fista(&s, &phi, gamma);
        let oracle = covariance_objective(&s, &phi, &lam, sig, gamma);
        assert!(
            ours <= oracle + 1e-5 && (ours - oracle).abs() <= 1e-5,
            "case {case}: p={p} K={k} gamma={gamma}: closed form {ours}, oracle {oracle}"
        );
    }
}

/// Two sites, one eigenvector: a scalar `λ ≥ 0` and `σ² ≥ 0`, searched on a
/// grid refined around the best point.
#[test]
fn closed_form_matches_grid_search_for_two_sites() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let (s, phi, gamma) = random_instance(&mut rng, 2, 1);
        let f = |l: f64, v: f64| covariance_objective(&s, &phi, &DMatrix::from_element(1, 1, l), v, gamma);
        let top = s.trace();
        let (mut lc, mut vc, mut width) = (top / 2.0, top / 2.0, top);
        for _ in 0..40 {
            let mut best = (f64::INFINITY, lc, vc);
            for i in 0..=40 {
                for j in 0..=40 {
                    let l = (lc - width / 2.0 + width * i as f64 / 40.0).max(0.0);
                    let v = (vc - width / 2.0 + width * j as f64 / 40.0).max(0.0);
                    let val = f(l, v);
                    if val < best.0 {
                        best = (val, l, v);
                    }
                }
            }
            lc = best.1;
            vc = best.2;
            width /= 4.0;
        }
        let est = estimate_from_phi(&s, &phi, gamma).unwrap();
        let ours = f(est.lambda[(0, 0)], est.sigma2);
        let grid = f(lc, vc);
        assert!(ours <= grid + 1e-9, "closed form {ours} vs grid {grid}");
        assert!((est.lambda[(0, 0)] - lc).abs() < 1e-6 && (est.sigma2 - vc).abs() < 1e-6);
    }
}

#[test]
fn noise_variance_is_the_residual_average_without_signal() {
    let s = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0, 2.0, 2.0]));
    let phi = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
    let est = estimate_from_phi(&s, &phi, 0.0).unwrap();
    assert_eq!(est.lhat, 0);
    assert!((est.sigma2 - 2.0).abs() < 1e-15);
    assert_eq!(est.lambda_star[0], 0.0);
}
