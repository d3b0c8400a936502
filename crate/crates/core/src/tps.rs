//! Thin-plate (and, in one dimension, natural cubic) spline machinery.
//!
//! A fitted eigenfunction is represented as
//!
//! ```text
//! f(s) = sum_i a_i g(|s - s_i|) + b_0 + sum_j b_j x_j
//! ```
//!
//! where `(a, b)` solve the bordered interpolation system
//! `[[G, E], [E', 0]] [a; b] = [v; 0]`. The roughness of the interpolant of
//! node values `v` is the quadratic form `v' Ω v`, with `Ω` the upper-left
//! `p x p` block of the inverse of the bordered matrix.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Result, SpatError};
use crate::linalg::{sym_eigen, symmetrize};

/// Radial kernel `g(r)` for spatial dimension `d`.
///
/// `d = 2`: `r^2 log(r) / (16 pi)`; `d = 1, 3`: `Gamma(d/2 - 2) / (16 pi^{d/2}) r^{4-d}`.
/// The value at `r = 0` is the continuous limit, 0.
pub fn kernel(r: f64, d: usize) -> Result<f64> {
    let coef = kernel_coefficient(d)?;
    if r <= 0.0 {
        return Ok(0.0);
    }
    Ok(match d {
        1 => coef * r * r * r,
        2 => coef * r * r * r.ln(),
        _ => coef * r,
    })
}

/// Leading constant of [`kernel`]. For `d = 1` and `d = 3` this is
/// `Gamma(d/2 - 2) / (16 pi^{d/2})` with `Gamma(-3/2) = 4 sqrt(pi) / 3` and
/// `Gamma(-1/2) = -2 sqrt(pi)`.
fn kernel_coefficient(d: usize) -> Result<f64> {
    match d {
        1 => Ok((4.0 * PI.sqrt() / 3.0) / (16.0 * PI.sqrt())),
        2 => Ok(1.0 / (16.0 * PI)),
        3 => Ok((-2.0 * PI.sqrt()) / (16.0 * PI.powf(1.5))),
        other => Err(SpatError::Dimension(other)),
    }
}

/// The observation sites `s_1, ..., s_p` as a `p x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDomain {
    locations: DMatrix<f64>,
}

impl SpatialDomain {
    pub fn new(locations: DMatrix<f64>) -> Result<Self> {
        let (p, d) = locations.shape();
        if !(1..=3).contains(&d) {
            return Err(SpatError::Dimension(d));
        }
        if p < d + 2 {
            return Err(SpatError::Argument(format!(
                "need at least {} sites in dimension {d}, got {p}",
                d + 2
            )));
        }
        if locations.iter().any(|v| !v.is_finite()) {
            return Err(SpatError::Data("non-finite site coordinate".into()));
        }
        Ok(Self { locations })
    }

    /// `count` equispaced sites on `[lo, hi]`.
    pub fn equispaced_1d(lo: f64, hi: f64, count: usize) -> Result<Self> {
        let step = if count > 1 { (hi - lo) / (count - 1) as f64 } else { 0.0 };
        Self::new(DMatrix::from_fn(count, 1, |i, _| {
            if i + 1 == count {
                hi
            } else {
                lo + step * i as f64
            }
        }))
    }

    /// Regular `side x side` grid on `[lo, hi]^2`, first coordinate varying fastest.
    pub fn regular_grid_2d(lo: f64, hi: f64, side: usize) -> Result<Self> {
        let axis = Self::equispaced_1d(lo, hi, side)?.locations;
        let mut locs = DMatrix::zeros(side * side, 2);
        for j in 0..side {
            for i in 0..side {
                let row = j * side + i;
                locs[(row, 0)] = axis[(i, 0)];
                locs[(row, 1)] = axis[(j, 0)];
            }
        }
        Self::new(locs)
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.locations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.locations.ncols()
    }

    /// Restricts the domain to the given site indices, in order.
    pub fn select(&self, sites: &[usize]) -> Result<Self> {
        let d = self.dim();
        Self::new(DMatrix::from_fn(sites.len(), d, |i, j| {
            self.locations[(sites[i], j)]
        }))
    }
}

/// Roughness matrix `Ω` together with the factored bordered system used to
/// compute spline coefficients.
#[derive(Debug, Clone)]
pub struct PenaltyOperator {
    omega: DMatrix<f64>,
    g: DMatrix<f64>,
    e: DMatrix<f64>,
    bordered: DMatrix<f64>,
    factor: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl PenaltyOperator {
    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn g_matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn e_matrix(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn bordered_matrix(&self) -> &DMatrix<f64> {
        &self.bordered
    }

    pub fn num_sites(&self) -> usize {
        self.g.nrows()
    }

    /// `v' Ω v`, the roughness of the spline interpolating `v`.
    pub fn roughness(&self, values: &DVector<f64>) -> f64 {
        (values.transpose() * &self.omega * values)[(0, 0)]
    }
}

/// Coefficients `(a, b)` of one interpolating spline.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoefficients {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
}

impl SplineCoefficients {
    /// `a' G a`, the bending energy of the spline.
    pub fn bending_energy(&self, penalty: &PenaltyOperator) -> f64 {
        (self.a.transpose() * penalty.g_matrix() * &self.a)[(0, 0)]
    }
}

fn distance(x: &DMatrix<f64>, i: usize, y: &DMatrix<f64>, j: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..x.ncols() {
        let diff = x[(i, c)] - y[(j, c)];
        acc += diff * diff;
    }
    acc.sqrt()
}

fn affine_rows(points: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = points.shape();
    DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { points[(i, j - 1)] })
}

/// Builds `G`, `E`, the factored bordered matrix, and `Ω`.
pub fn build_penalty(domain: &SpatialDomain) -> Result<PenaltyOperator> {
    let locs = domain.locations();
    let (p, d) = locs.shape();

    let scale = locs.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let mut g = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            let r = distance(locs, i, locs, j);
            if r <= 1e-12 * scale {
                return Err(SpatError::DuplicateSites { first: i, second: j });
            }
            let v = kernel(r, d)?;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let e = affine_rows(locs);

    let e_sv = e.clone().singular_values();
    let e_max = e_sv.iter().cloned().fold(0.0_f64, f64::max);
    let e_min = e_sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if e_min <= 1e-12 * e_max {
        return Err(SpatError::Conditioning(
            "sites do not span the affine space (collinear or coplanar)".into(),
        ));
    }

    let m = p + d + 1;
    let mut bordered = DMatrix::zeros(m, m);
    bordered.view_mut((0, 0), (p, p)).copy_from(&g);
    bordered.view_mut((0, p), (p, d + 1)).copy_from(&e);
    bordered.view_mut((p, 0), (d + 1, p)).copy_from(&e.transpose());

    let factor = bordered.clone().lu();
    let inverse = factor
        .try_inverse()
        .ok_or_else(|| SpatError::Conditioning("bordered matrix is not invertible".into()))?;
    if inverse.iter().any(|v| !v.is_finite()) {
        return Err(SpatError::Conditioning("bordered inverse is not finite".into()));
    }

    let mut omega = symmetrize(&inverse.view((0, 0), (p, p)).into_owned());
    let eig = sym_eigen(&omega)?;
    let min_eig = eig.values[p - 1];
    if min_eig < -1e-10 {
        log::debug!("clamping negative roughness eigenvalues (min {min_eig:e})");
        let clamped = eig.values.map(|v| v.max(0.0));
        omega = symmetrize(&(&eig.vectors * DMatrix::from_diagonal(&clamped) * eig.vectors.transpose()));
    }

    Ok(PenaltyOperator {
        omega,
        g,
        e,
        bordered,
        factor,
    })
}

/// Solves the bordered system for node values `values`.
pub fn solve_coefficients(penalty: &PenaltyOperator, values: &DVector<f64>) -> Result<SplineCoefficients> {
    let p = penalty.num_sites();
    if values.len() != p {
        return Err(SpatError::Shape(format!(
            "expected {p} node values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SpatError::Data("non-finite node value".into()));
    }
    let m = penalty.bordered.nrows();
    let mut rhs = DVector::zeros(m);
    rhs.rows_mut(0, p).copy_from(values);

    let mut sol = penalty
        .factor
        .solve(&rhs)
        .ok_or_else(|| SpatError::Conditioning("bordered system solve failed".into()))?;
    // One round of iterative refinement.
    let residual = &rhs - &penalty.bordered * &sol;
    if let Some(corr) = penalty.factor.solve(&residual) {
        sol += corr;
    }

    Ok(SplineCoefficients {
        a: sol.rows(0, p).into_owned(),
        b: sol.rows(p, m - p).into_owned(),
    })
}

/// Rows `[g(|q - s_1|), ..., g(|q - s_p|), 1, q']` for every query point.
pub fn design_at(domain: &SpatialDomain, query: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = domain.dim();
    if query.ncols() != d {
        return Err(SpatError::Shape(format!(
            "query has {} coordinates, domain has {d}",
            query.ncols()
        )));
    }
    let locs = domain.locations();
    let p = locs.nrows();
    let mut out = DMatrix::zeros(query.nrows(), p + d + 1);
    for q in 0..query.nrows() {
        for i in 0..p {
            out[(q, i)] = kernel(distance(query, q, locs, i), d)?;
        }
        out[(q, p)] = 1.0;
        for j in 0..d {
            out[(q, p + 1 + j)] = query[(q, j)];
        }
    }
    Ok(out)
}

/// Evaluates the spline at each row of `query`.
pub fn evaluate(coeffs: &SplineCoefficients, domain: &SpatialDomain, query: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = domain.len();
    if coeffs.a.len() != p || coeffs.b.len() != domain.dim() + 1 {
        return Err(SpatError::Shape(format!(
            "coefficients ({}, {}) do not match a domain of {p} sites in dimension {}",
            coeffs.a.len(),
            coeffs.b.len(),
            domain.dim()
        )));
    }
    let design = design_at(domain, query)?;
    let mut stacked = DVector::zeros(p + coeffs.b.len());
    stacked.rows_mut(0, p).copy_from(&coeffs.a);
    stacked.rows_mut(p, coeffs.b.len()).copy_from(&coeffs.b);
    Ok(design * stacked)
}

/// Evaluates several splines at once; column `k` of the result is spline `k`.
pub fn evaluate_many(
    splines: &[SplineCoefficients],
    domain: &SpatialDomain,
    query: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = domain.len();
    let nb = domain.dim() + 1;
    let mut coefs = DMatrix::zeros(p + nb, splines.len());
    for (k, s) in splines.iter().enumerate() {
        if s.a.len() != p || s.b.len() != nb {
            return Err(SpatError::Shape(format!("spline {k} does not match the domain")));
        }
        coefs.view_mut((0, k), (p, 1)).copy_from(&s.a);
        coefs.view_mut((p, k), (nb, 1)).copy_from(&s.b);
    }
    Ok(design_at(domain, query)? * coefs)
}
