//! Critical points: Newton search from a grid, Morse index, linearization
//! `G^{-1} Hess F` and the eigenvalue gap that makes a maximum simple.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{GeometryError, Landscape, Manifold};
use crate::linalg::{self, symmetric_eigen};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CriticalError {
    #[error("grid needs at least 4 nodes per axis, got {0}")]
    GridTooCoarse(usize),
    #[error("critical point at {location:?} is degenerate (min |eigenvalue| = {margin:e})")]
    DegenerateCriticalPoint { location: Vec<f64>, margin: f64 },
    #[error("critical point {0} is not a maximum")]
    NotAMaximum(usize),
    #[error("perturbation size {eta:e} exceeds a quarter of the eigenvalue gap {gap:e}")]
    GapTooSmall { eta: f64, gap: f64 },
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<crate::field::EvalError> for CriticalError {
    fn from(e: crate::field::EvalError) -> Self {
        CriticalError::Geometry(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Minimum,
    Saddle,
    Maximum,
}

/// Linearization of the gradient field at a critical point.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// `H = G^{-1} Hess F` in chart coordinates.
    pub matrix: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors of `H` as columns, Euclidean unit length, sign normalized.
    pub eigenvectors: DMatrix<f64>,
    /// `Y^T G^{1/2}`: maps a chart displacement to coordinates where the
    /// linearized field is diagonal and the metric is the identity.
    pub eigen_coords: DMatrix<f64>,
}

impl Linearization {
    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        self.eigenvectors.column(k).iter().copied().collect()
    }

    pub fn to_eigen_coords(&self, displacement: &[f64]) -> Vec<f64> {
        (&self.eigen_coords * DVector::from_column_slice(displacement)).as_slice().to_vec()
    }
}

/// Spectrum of `G^{-1} hess` through the similarity `G^{-1/2} hess G^{-1/2}`.
pub fn linearize(g: &DMatrix<f64>, hess: &DMatrix<f64>) -> Result<Linearization, CriticalError> {
    let n = g.nrows();
    let ge = symmetric_eigen(g);
    if ge.values[0] <= 0.0 {
        return Err(CriticalError::NotSpd);
    }
    let g_half = ge.map(f64::sqrt);
    let g_inv_half = ge.map(|v| 1.0 / v.sqrt());
    let mut s = &g_inv_half * hess * &g_inv_half;
    linalg::symmetrize(&mut s);
    let se = symmetric_eigen(&s);
    let tol = 1e-12;
    let mut vectors = &g_inv_half * &se.vectors;
    for k in 0..n {
        let mut col: Vec<f64> = vectors.column(k).iter().copied().collect();
        let norm = linalg::norm(&col);
        col.iter_mut().for_each(|c| *c /= norm);
        linalg::normalize_sign(&mut col, tol);
        vectors.set_column(k, &DVector::from_vec(col));
    }
    let matrix = &g_inv_half * &g_inv_half * hess;
    let eigen_coords = se.vectors.transpose() * g_half;
    Ok(Linearization { matrix, eigenvalues: se.values, eigenvectors: vectors, eigen_coords })
}

/// Linearization of `grad F` at `x` (meaningful where `dF(x) = 0`).
pub fn linearization(landscape: &Landscape, x: &[f64]) -> Result<Linearization, CriticalError> {
    let jet = landscape.field.jet2(x)?;
    let g = landscape.metric.matrix_at(x)?;
    landscape.metric.factor(x)?;
    linearize(&g, &jet.hessian_matrix())
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint {
    pub id: usize,
    pub location: Vec<f64>,
    pub value: f64,
    #[serde(rename = "index")]
    pub morse_index: usize,
    pub eigenvalues: Vec<f64>,
    /// `(lambda_2 - lambda_1) / |lambda_1|`; absent in dimension one.
    pub gap_rel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v1: Option<Vec<f64>>,
    pub nondegeneracy_margin: f64,
    pub residual: f64,
    #[serde(skip)]
    pub linearization: Linearization,
}

impl CriticalPoint {
    pub fn kind(&self) -> Kind {
        let n = self.eigenvalues.len();
        match self.morse_index {
            0 => Kind::Minimum,
            i if i == n => Kind::Maximum,
            _ => Kind::Saddle,
        }
    }

    pub fn is_maximum(&self) -> bool {
        self.kind() == Kind::Maximum
    }

    pub fn is_minimum(&self) -> bool {
        self.kind() == Kind::Minimum
    }
}

/// Outcome of the eigenvalue-gap test at a maximum.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Simplicity {
    Simple { v1: Vec<f64>, gap_rel: Option<f64> },
    NonSimpleTie { gap_rel: f64 },
}

pub fn relative_gap(eigenvalues: &[f64]) -> Option<f64> {
    (eigenvalues.len() >= 2).then(|| (eigenvalues[1] - eigenvalues[0]) / eigenvalues[0].abs())
}

pub fn simplicity_gap(p: &CriticalPoint, gap_rel_tol: f64) -> Result<Simplicity, CriticalError> {
    if !p.is_maximum() {
        return Err(CriticalError::NotAMaximum(p.id));
    }
    Ok(classify_gap(&p.eigenvalues, &p.linearization.eigenvector(0), gap_rel_tol))
}

fn classify_gap(eigenvalues: &[f64], v1: &[f64], gap_rel_tol: f64) -> Simplicity {
    match relative_gap(eigenvalues) {
        Some(gap) if gap <= gap_rel_tol => Simplicity::NonSimpleTie { gap_rel: gap },
        gap_rel => Simplicity::Simple { v1: v1.to_vec(), gap_rel },
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalSet {
    pub dim: usize,
    pub points: Vec<CriticalPoint>,
}

impl CriticalSet {
    pub fn get(&self, id: usize) -> &CriticalPoint {
        &self.points[id]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn of_kind(&self, kind: Kind) -> impl Iterator<Item = &CriticalPoint> {
        self.points.iter().filter(move |p| p.kind() == kind)
    }

    pub fn minima(&self) -> impl Iterator<Item = &CriticalPoint> {
        self.of_kind(Kind::Minimum)
    }

    pub fn saddles(&self) -> impl Iterator<Item = &CriticalPoint> {
        self.of_kind(Kind::Saddle)
    }

    pub fn maxima(&self) -> impl Iterator<Item = &CriticalPoint> {
        self.of_kind(Kind::Maximum)
    }

    /// `sum (-1)^index`.
    pub fn euler_sum(&self) -> i64 {
        self.points.iter().map(|p| if p.morse_index % 2 == 0 { 1 } else { -1 }).sum()
    }

    /// Nearest point and its distance; ties go to the lowest id.
    pub fn nearest(&self, manifold: &Manifold, x: &[f64]) -> Option<(usize, f64)> {
        self.points.iter().map(|p| (p.id, manifold.distance(x, &p.location))).fold(None, |best, (id, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((id, d)),
        })
    }

    /// Distance from point `id` to the closest other critical point.
    pub fn isolation(&self, manifold: &Manifold, id: usize) -> f64 {
        let p = &self.points[id].location;
        self.points
            .iter()
            .filter(|q| q.id != id)
            .map(|q| manifold.distance(p, &q.location))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "dim": self.dim, "points": self.points })
    }
}

const NEWTON_MAX_ITER: usize = 60;
const POLISH_ITER: usize = 4;

fn jacobian(landscape: &Landscape, x: &[f64]) -> Result<DMatrix<f64>, GeometryError> {
    if landscape.metric.is_identity() {
        return Ok(landscape.field.jet2(x)?.hessian_matrix());
    }
    let n = x.len();
    let mut j = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for k in 0..n {
        let h = 1e-6 * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        xm[k] = x[k] - h;
        let gp = landscape.riemannian_gradient(&xp)?;
        let gm = landscape.riemannian_gradient(&xm)?;
        for i in 0..n {
            j[(i, k)] = (gp[i] - gm[i]) / (2.0 * h);
        }
        xp[k] = x[k];
        xm[k] = x[k];
    }
    Ok(j)
}

/// Newton on `grad F = 0`; `None` when the iteration diverges or stalls.
fn newton(landscape: &Landscape, x0: &[f64], max_step: f64) -> Option<Vec<f64>> {
    let manifold = &landscape.manifold;
    let tol = landscape.tolerances.grad_tol;
    let mut x = x0.to_vec();
    let mut polish = 0;
    for _ in 0..NEWTON_MAX_ITER {
        let g = landscape.riemannian_gradient(&x).ok()?;
        let converged = linalg::norm(&g) <= tol;
        if converged {
            polish += 1;
            if polish > POLISH_ITER || linalg::norm(&g) == 0.0 {
                return Some(x);
            }
        }
        let j = jacobian(landscape, &x).ok()?;
        let step = j.lu().solve(&DVector::from_vec(g))?;
        let mut len = step.norm();
        if !len.is_finite() {
            return if converged { Some(x) } else { None };
        }
        let scale = if len > max_step { max_step / len } else { 1.0 };
        len *= scale;
        for (xi, si) in x.iter_mut().zip(step.iter()) {
            *xi -= scale * si;
        }
        manifold.wrap(&mut x);
        if !manifold.contains(&x) {
            return None;
        }
        if converged && len < 1e-15 {
            return Some(x);
        }
    }
    let g = landscape.riemannian_gradient(&x).ok()?;
    (linalg::norm(&g) <= tol).then_some(x)
}

fn grid_nodes(manifold: &Manifold, k: usize) -> Vec<Vec<f64>> {
    let n = manifold.dim();
    let axis = |i: usize, j: usize| -> f64 {
        match manifold {
            Manifold::Box { lower, upper } => lower[i] + (upper[i] - lower[i]) * (j as f64 + 0.5) / k as f64,
            _ => manifold.period(i).unwrap() * j as f64 / k as f64,
        }
    };
    let total = k.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|i| {
                    let j = idx % k;
                    idx /= k;
                    axis(i, j)
                })
                .collect()
        })
        .collect()
}

/// Newton from every node of a uniform grid, deduplicated and classified.
///
/// Points are numbered by decreasing value (ties by coordinates).
pub fn find_critical_points(landscape: &Landscape, grid_per_axis: usize) -> Result<CriticalSet, CriticalError> {
    if grid_per_axis < 4 {
        return Err(CriticalError::GridTooCoarse(grid_per_axis));
    }
    let manifold = &landscape.manifold;
    let tol = &landscape.tolerances;
    let n = manifold.dim();
    let nodes = grid_nodes(manifold, grid_per_axis);
    let max_step = manifold.injectivity_radius() / 2.0;
    let roots: Vec<Vec<f64>> = nodes.par_iter().filter_map(|x0| newton(landscape, x0, max_step)).collect();

    let mut unique: Vec<Vec<f64>> = Vec::new();
    for r in roots {
        if unique.iter().all(|u| manifold.distance(u, &r) >= tol.dedup_radius) {
            unique.push(r);
        }
    }

    let mut points = Vec::with_capacity(unique.len());
    for location in unique {
        let lin = linearization(landscape, &location)?;
        let margin = lin.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if margin <= tol.grad_tol.sqrt() {
            return Err(CriticalError::DegenerateCriticalPoint { location, margin });
        }
        let value = landscape.value(&location)?;
        let residual = linalg::norm(&landscape.riemannian_gradient(&location)?);
        let morse_index = lin.eigenvalues.iter().filter(|v| **v < 0.0).count();
        let gap_rel = relative_gap(&lin.eigenvalues);
        let v1 = if morse_index == n {
            match classify_gap(&lin.eigenvalues, &lin.eigenvector(0), tol.gap_rel_tol) {
                Simplicity::Simple { v1, .. } => Some(v1),
                Simplicity::NonSimpleTie { .. } => None,
            }
        } else {
            None
        };
        points.push(CriticalPoint {
            id: 0,
            location,
            value,
            morse_index,
            eigenvalues: lin.eigenvalues.clone(),
            gap_rel,
            v1,
            nondegeneracy_margin: margin,
            residual,
            linearization: lin,
        });
    }
    points.sort_by(|a, b| {
        b.value.total_cmp(&a.value).then_with(|| {
            a.location.iter().zip(&b.location).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    for (id, p) in points.iter_mut().enumerate() {
        p.id = id;
    }
    Ok(CriticalSet { dim: n, points })
}

/// Symmetric positive definite `Q` with `||Q|| < eps` such that `(A + Q) B`
/// has pairwise distinct eigenvalues.
pub fn perturb_distinct_eigs(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>, CriticalError> {
    let n = a.nrows();
    let be = symmetric_eigen(b);
    if be.values[0] <= 0.0 || symmetric_eigen(a).values[0] <= 0.0 {
        return Err(CriticalError::NotSpd);
    }
    let b_half = be.map(f64::sqrt);
    let b_inv_half = be.map(|v| 1.0 / v.sqrt());
    let mut m = &b_half * a * &b_half;
    linalg::symmetrize(&mut m);
    let p = symmetric_eigen(&m);
    // ||Q|| <= max eps_i / lambda_min(B); D is ascending, so strictly
    // increasing shifts keep the shifted diagonal strictly increasing
    let eta = 0.5 * eps * be.values[0];
    let shifts = DVector::from_iterator(n, (1..=n).map(|i| eta * i as f64 / n as f64));
    let v = &b_inv_half * &p.vectors;
    let mut q = &v * DMatrix::from_diagonal(&shifts) * v.transpose();
    linalg::symmetrize(&mut q);
    Ok(q)
}

/// Norm and smallest eigenvalue of `Q`, and the smallest gap in the spectrum
/// of `(A + Q) B`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbationOutcome {
    pub q_norm: f64,
    pub q_min_eig: f64,
    pub min_gap: f64,
}

impl PerturbationOutcome {
    pub fn passes(&self, eps: f64) -> bool {
        self.q_min_eig > 0.0 && self.q_norm < eps && self.min_gap > 0.0
    }
}

pub fn check_perturbation(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> Result<PerturbationOutcome, CriticalError> {
    let q = perturb_distinct_eigs(a, b, eps)?;
    let qe = symmetric_eigen(&q);
    let b_half = symmetric_eigen(b).map(f64::sqrt);
    let mut m = &b_half * (a + &q) * &b_half;
    linalg::symmetrize(&mut m);
    let values = symmetric_eigen(&m).values;
    let min_gap = values.as_slice().windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    Ok(PerturbationOutcome { q_norm: qe.values[q.nrows() - 1].abs().max(qe.values[0].abs()), q_min_eig: qe.values[0], min_gap })
}

/// Random SPD `A`, `B` for which `AB` has a repeated eigenvalue.
pub fn repeated_spectrum_pair(n: usize, rng: &mut StreamRng) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut b = m.transpose() * &m + DMatrix::identity(n, n) * 0.5;
    linalg::symmetrize(&mut b);
    let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    d[1] = d[0];
    let p = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
    let b_inv_half = symmetric_eigen(&b).map(|v| 1.0 / v.sqrt());
    let mut a = &b_inv_half * &p * DMatrix::from_diagonal(&DVector::from_vec(d)) * p.transpose() * &b_inv_half;
    linalg::symmetrize(&mut a);
    (a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuityReport {
    pub trials: usize,
    pub eta: f64,
    pub gap: f64,
    pub max_angle: f64,
    /// Largest `angle * gap / eta`.
    pub max_ratio: f64,
}

impl ContinuityReport {
    pub fn passes(&self, bound: f64) -> bool {
        self.max_ratio <= bound
    }
}

/// Angle between lines spanned by unit vectors.
pub fn principal_angle(u: &[f64], v: &[f64]) -> f64 {
    let c = linalg::dot(u, v).abs();
    let perp: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - linalg::dot(u, v) * b).collect();
    linalg::norm(&perp).atan2(c)
}

fn random_symmetric(n: usize, norm: f64, rng: &mut StreamRng) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = rng.random_range(-1.0..1.0);
            e[(i, j)] = v;
            e[(j, i)] = v;
        }
    }
    let s = linalg::symmetric_norm2(&e);
    if s == 0.0 {
        return e;
    }
    e * (norm / s)
}

/// Perturbs `a` by random symmetric matrices of spectral norm `eta` and
/// measures how far the lowest eigenvector turns.
pub fn eigvec_continuity_check(
    a: &DMatrix<f64>,
    eta: f64,
    trials: usize,
    rng: &mut StreamRng,
) -> Result<ContinuityReport, CriticalError> {
    let e0 = symmetric_eigen(a);
    let n = a.nrows();
    let gap = if n >= 2 { e0.values[1] - e0.values[0] } else { f64::INFINITY };
    if !(eta >= 0.0 && eta <= gap / 4.0) {
        return Err(CriticalError::GapTooSmall { eta, gap });
    }
    let v0: Vec<f64> = e0.vector(0).iter().copied().collect();
    let mut report = ContinuityReport { trials, eta, gap, max_angle: 0.0, max_ratio: 0.0 };
    for _ in 0..trials {
        let e = random_symmetric(n, eta, rng);
        let v: Vec<f64> = symmetric_eigen(&(a + e)).vector(0).iter().copied().collect();
        let angle = principal_angle(&v0, &v);
        report.max_angle = report.max_angle.max(angle);
        if eta > 0.0 {
            report.max_ratio = report.max_ratio.max(angle * gap / eta);
        }
    }
    Ok(report)
}
