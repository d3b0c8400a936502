//! Dense linear-algebra helpers shared by the estimator modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, SpatError};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order.
///
/// Ties are ordered by the first entry in which the two eigenvectors differ
/// (larger first), so the result does not depend on the ordering the
/// underlying QR iteration happens to produce.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen(m: &DMatrix<f64>) -> Result<SortedEigen> {
    if !m.is_square() {
        return Err(SpatError::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SpatError::Numerical(
            "non-finite entry in symmetric eigenproblem".into(),
        ));
    }
    let sym = symmetrize(m);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| SpatError::Numerical("symmetric eigensolver did not converge".into()))?;

    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut vectors = eig.eigenvectors;
    apply_sign_convention_columns(&mut vectors);
    order.sort_by(|&a, &b| {
        let (va, vb) = (eig.eigenvalues[a], eig.eigenvalues[b]);
        vb.partial_cmp(&va)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                for i in 0..n {
                    let (x, y) = (vectors[(i, a)], vectors[(i, b)]);
                    if x != y {
                        return y.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Equal);
                    }
                }
                std::cmp::Ordering::Equal
            })
    });

    let values = DVector::from_iterator(n, order.iter().map(|&j| eig.eigenvalues[j]));
    let sorted = DMatrix::from_fn(n, n, |i, j| vectors[(i, order[j])]);
    Ok(SortedEigen {
        values,
        vectors: sorted,
    })
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `-1` if the largest-magnitude entry is negative, else `1`. Ties in
/// magnitude go to the lowest index.
pub fn sign_convention_factor(col: &[f64]) -> f64 {
    let mut best = 0usize;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > best_abs {
            best_abs = v.abs();
            best = i;
        }
    }
    if !col.is_empty() && col[best] < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Flips columns so that each one's largest-magnitude entry is nonnegative.
pub fn apply_sign_convention_columns(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        if sign_convention_factor(m.column(j).as_slice()) < 0.0 {
            m.column_mut(j).neg_mut();
        }
    }
}

/// Orthonormal polar factor `U V'` of the thin SVD `U D V'` of `m`.
pub fn polar_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SpatError::Numerical("non-finite entry in polar factor".into()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| SpatError::Numerical("SVD did not return U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| SpatError::Numerical("SVD did not return V'".into()))?;
    Ok(u * v_t)
}

/// Largest principal angle (radians) between the column spaces of two
/// matrices with orthonormal columns.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.nrows(), b.nrows(), "principal angle: row mismatch");
    // sin of the largest angle is the spectral norm of (I - AA')B; computing it
    // that way stays accurate for tiny angles where acos(sigma_min) does not.
    let residual = b - a * (a.transpose() * b);
    let sv = residual.singular_values();
    let s = sv.iter().cloned().fold(0.0_f64, f64::max).min(1.0);
    s.asin()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `‖M'M - I‖_∞` entrywise.
pub fn orthonormality_defect(m: &DMatrix<f64>) -> f64 {
    let k = m.ncols();
    max_abs(&(m.transpose() * m - DMatrix::identity(k, k)))
}

/// Column means of an `n x p` matrix.
pub fn column_means(y: &DMatrix<f64>) -> DVector<f64> {
    let n = y.nrows().max(1) as f64;
    DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.sum() / n))
}

/// `y'y / n`.
pub fn sample_covariance(y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = y.nrows().max(1) as f64;
    symmetrize(&(y.transpose() * y)) / n
}

/// Values from `lo` to `hi` equally spaced on the log scale. The endpoints
/// are emitted exactly.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let step = (b - a) / (count - 1) as f64;
            (0..count)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == count - 1 {
                        hi
                    } else {
                        (a + step * i as f64).exp()
                    }
                })
                .collect()
        }
    }
}

pub fn select_rows(y: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), y.ncols(), |i, j| y[(rows[i], j)])
}
