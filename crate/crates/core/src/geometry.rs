//! Charts, metrics, densities and the Riemannian gradient.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{EvalError, ScalarField};
use crate::rng::{SeedStream, StreamRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid manifold: {0}")]
    InvalidManifold(String),
    #[error("metric is not symmetric positive definite at {point:?}")]
    MetricNotSpd { point: Vec<f64> },
    #[error("metric entries ({i},{j}) and ({j},{i}) differ")]
    MetricNotSymmetric { i: usize, j: usize },
    #[error("density must be positive, got {value} at {point:?}")]
    NonPositiveDensity { point: Vec<f64>, value: f64 },
    #[error("density {value} at {point:?} exceeds the sampling envelope {envelope}")]
    DensityEnvelope { point: Vec<f64>, value: f64, envelope: f64 },
    #[error("rejection sampling accepted nothing in {attempts} attempts")]
    RejectionOverflow { attempts: usize },
    #[error("radius {radius} does not fit in a single chart")]
    BallTooLarge { radius: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("operation requires a box manifold")]
    NotABox,
    #[error("descent leaves the box at {point:?} (inward margin {margin})")]
    NotInwardFlowing { point: Vec<f64>, margin: f64 },
    #[error("tolerance `{0}` must be strictly positive")]
    InvalidTolerance(&'static str),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Coordinate chart of the manifold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Manifold {
    /// Flat torus with the given periods; coordinates kept in `[0, L_i)`.
    Torus { periods: Vec<f64> },
    /// Axis-aligned box; the landscape must flow inward on its faces.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Circle { period: f64 },
}

impl Manifold {
    pub fn torus(periods: Vec<f64>) -> Result<Self, GeometryError> {
        if periods.is_empty() || periods.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(GeometryError::InvalidManifold(format!("torus periods must be positive: {periods:?}")));
        }
        Ok(Manifold::Torus { periods })
    }

    pub fn circle(period: f64) -> Result<Self, GeometryError> {
        if !(period.is_finite() && period > 0.0) {
            return Err(GeometryError::InvalidManifold(format!("circle period must be positive: {period}")));
        }
        Ok(Manifold::Circle { period })
    }

    pub fn new_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, GeometryError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(GeometryError::InvalidManifold("box bounds must have equal, positive length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u)) {
            return Err(GeometryError::InvalidManifold(format!("box needs lower < upper: {lower:?} {upper:?}")));
        }
        Ok(Manifold::Box { lower, upper })
    }

    /// The cube `[lo, hi]^n`.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self, GeometryError> {
        Self::new_box(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        match self {
            Manifold::Torus { periods } => periods.len(),
            Manifold::Box { lower, .. } => lower.len(),
            Manifold::Circle { .. } => 1,
        }
    }

    /// Period of coordinate `axis`, `None` for non-periodic axes.
    pub fn period(&self, axis: usize) -> Option<f64> {
        match self {
            Manifold::Torus { periods } => periods.get(axis).copied(),
            Manifold::Circle { period } => (axis == 0).then_some(*period),
            Manifold::Box { .. } => None,
        }
    }

    pub fn is_box(&self) -> bool {
        matches!(self, Manifold::Box { .. })
    }

    /// Rank of the first homology group for one-dimensional charts.
    pub fn h1_rank(&self) -> Option<usize> {
        match self {
            Manifold::Circle { .. } => Some(1),
            Manifold::Torus { periods } if periods.len() == 1 => Some(1),
            Manifold::Box { lower, .. } if lower.len() == 1 => Some(0),
            _ => None,
        }
    }

    /// Brings periodic coordinates into `[0, L)`.
    pub fn wrap(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            if let Some(l) = self.period(i) {
                let mut w = xi.rem_euclid(l);
                if w >= l {
                    w = 0.0;
                }
                *xi = w;
            }
        }
    }

    pub fn wrapped(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.wrap(&mut y);
        y
    }

    /// Minimum-image displacement `to - from`.
    pub fn displacement(&self, from: &[f64], to: &[f64]) -> Vec<f64> {
        from.iter()
            .zip(to)
            .enumerate()
            .map(|(i, (a, b))| {
                let d = b - a;
                match self.period(i) {
                    Some(l) => d - l * (d / l).round(),
                    None => d,
                }
            })
            .collect()
    }

    /// Chart-Euclidean distance (minimum image on periodic axes).
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        crate::linalg::norm(&self.displacement(x, y))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Manifold::Box { lower, upper } => {
                x.iter().zip(lower.iter().zip(upper)).all(|(v, (l, u))| *v >= *l && *v <= *u)
            }
            _ => x.iter().all(|v| v.is_finite()),
        }
    }

    /// Largest radius for which a ball is guaranteed to sit in one chart.
    pub fn injectivity_radius(&self) -> f64 {
        match self {
            Manifold::Torus { periods } => periods.iter().copied().fold(f64::INFINITY, f64::min) / 2.0,
            Manifold::Circle { period } => period / 2.0,
            Manifold::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| u - l).fold(f64::INFINITY, f64::min)
            }
        }
    }
}

/// Riemannian metric `G(x)` in chart coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricField {
    Identity,
    /// Row-major `n x n` entries; symmetric by construction.
    Matrix { dim: usize, entries: Vec<ScalarField> },
}

impl MetricField {
    pub fn from_entries(dim: usize, entries: Vec<ScalarField>) -> Result<Self, GeometryError> {
        if entries.len() != dim * dim {
            return Err(GeometryError::DimensionMismatch { expected: dim * dim, found: entries.len() });
        }
        for i in 0..dim {
            for j in i + 1..dim {
                if entries[i * dim + j].expr() != entries[j * dim + i].expr() {
                    return Err(GeometryError::MetricNotSymmetric { i: i + 1, j: j + 1 });
                }
            }
        }
        Ok(MetricField::Matrix { dim, entries })
    }

    /// Constant metric from a symmetric matrix.
    pub fn constant(g: &DMatrix<f64>) -> Result<Self, GeometryError> {
        let n = g.nrows();
        let entries = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                let (i, j) = if i <= j { (i, j) } else { (j, i) };
                ScalarField::constant(g[(i, j)], n)
            })
            .collect();
        Self::from_entries(n, entries)
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, MetricField::Identity)
    }

    pub fn matrix_at(&self, x: &[f64]) -> Result<DMatrix<f64>, GeometryError> {
        match self {
            MetricField::Identity => Ok(DMatrix::identity(x.len(), x.len())),
            MetricField::Matrix { dim, entries } => {
                let n = *dim;
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in i..n {
                        let v = entries[i * n + j].value(x)?;
                        g[(i, j)] = v;
                        g[(j, i)] = v;
                    }
                }
                Ok(g)
            }
        }
    }

    /// Cholesky factor of `G(x)`; failure means the metric is not SPD there.
    pub fn factor(&self, x: &[f64]) -> Result<Cholesky<f64, Dyn>, GeometryError> {
        let g = self.matrix_at(x)?;
        Cholesky::new(g).ok_or_else(|| GeometryError::MetricNotSpd { point: x.to_vec() })
    }
}

/// Reference density of the measure used for sampling balls.
#[derive(Clone, Debug, PartialEq)]
pub enum Density {
    /// `sqrt(det G)`.
    Riemannian,
    Field(ScalarField),
}

/// Numerical tolerances shared by the analyses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceSet {
    pub grad_tol: f64,
    pub dedup_radius: f64,
    pub gap_rel_tol: f64,
    pub capture_radius: f64,
    pub ode_rel_tol: f64,
    pub ode_abs_tol: f64,
    pub t_max: f64,
}

impl Default for ToleranceSet {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            dedup_radius: 1e-5,
            gap_rel_tol: 1e-6,
            capture_radius: 1e-3,
            ode_rel_tol: 1e-9,
            ode_abs_tol: 1e-12,
            t_max: 1e4,
        }
    }
}

impl ToleranceSet {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let checks = [
            ("grad_tol", self.grad_tol),
            ("dedup_radius", self.dedup_radius),
            ("gap_rel_tol", self.gap_rel_tol),
            ("capture_radius", self.capture_radius),
            ("ode_rel_tol", self.ode_rel_tol),
            ("ode_abs_tol", self.ode_abs_tol),
            ("t_max", self.t_max),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v > 0.0) {
                return Err(GeometryError::InvalidTolerance(name));
            }
        }
        Ok(())
    }

    /// Every ODE and root tolerance scaled by `factor` (e.g. 0.1 to tighten).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grad_tol: self.grad_tol * factor,
            ode_rel_tol: self.ode_rel_tol * factor,
            ode_abs_tol: self.ode_abs_tol * factor,
            ..*self
        }
    }
}

/// A function on a chart together with the metric, density and tolerances.
#[derive(Clone, Debug)]
pub struct Landscape {
    pub manifold: Manifold,
    pub field: ScalarField,
    pub metric: MetricField,
    pub density: Density,
    pub tolerances: ToleranceSet,
}

impl Landscape {
    pub fn new(
        manifold: Manifold,
        field: ScalarField,
        metric: MetricField,
        density: Density,
        tolerances: ToleranceSet,
    ) -> Result<Self, GeometryError> {
        let n = manifold.dim();
        if field.dim() != n {
            return Err(GeometryError::DimensionMismatch { expected: n, found: field.dim() });
        }
        if let MetricField::Matrix { dim, .. } = &metric {
            if *dim != n {
                return Err(GeometryError::DimensionMismatch { expected: n, found: *dim });
            }
        }
        if let Density::Field(d) = &density {
            if d.dim() != n {
                return Err(GeometryError::DimensionMismatch { expected: n, found: d.dim() });
            }
        }
        tolerances.validate()?;
        Ok(Self { manifold, field, metric, density, tolerances })
    }

    /// Identity metric, Riemannian density, default tolerances.
    pub fn euclidean(manifold: Manifold, field: ScalarField) -> Result<Self, GeometryError> {
        Self::new(manifold, field, MetricField::Identity, Density::Riemannian, ToleranceSet::default())
    }

    pub fn from_builtin(name: &str) -> Result<Self, crate::Error> {
        let b = crate::field::builtin(name)?;
        Ok(Self::euclidean(b.manifold, b.field)?)
    }

    pub fn with_tolerances(mut self, tolerances: ToleranceSet) -> Result<Self, GeometryError> {
        tolerances.validate()?;
        self.tolerances = tolerances;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.manifold.dim()
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, GeometryError> {
        Ok(self.field.value(x)?)
    }

    /// Writes `G(x)^{-1} dF(x)` into `out` and returns `F(x)`.
    pub fn riemannian_gradient_into(&self, x: &[f64], out: &mut [f64]) -> Result<f64, GeometryError> {
        let value = self.field.gradient_into(x, out)?;
        if !self.metric.is_identity() {
            let chol = self.metric.factor(x)?;
            let v = chol.solve(&DVector::from_column_slice(out));
            out.copy_from_slice(v.as_slice());
        }
        Ok(value)
    }

    pub fn riemannian_gradient(&self, x: &[f64]) -> Result<Vec<f64>, GeometryError> {
        let mut g = vec![0.0; self.dim()];
        self.riemannian_gradient_into(x, &mut g)?;
        Ok(g)
    }

    pub fn density_at(&self, x: &[f64]) -> Result<f64, GeometryError> {
        let value = match &self.density {
            Density::Riemannian => match &self.metric {
                MetricField::Identity => 1.0,
                m => {
                    let chol = m.factor(x)?;
                    chol.l().diagonal().iter().product::<f64>()
                }
            },
            Density::Field(f) => f.value(x)?,
        };
        if !(value > 0.0 && value.is_finite()) {
            return Err(GeometryError::NonPositiveDensity { point: x.to_vec(), value });
        }
        Ok(value)
    }

    fn density_is_constant(&self) -> bool {
        match &self.density {
            Density::Riemannian => self.metric.is_identity(),
            Density::Field(f) => f.expr().max_var().is_none(),
        }
    }
}

/// Euclidean and metric inner products agree with the differential:
/// `g(grad F, X) = dF . X`.
pub fn riemannian_gradient(landscape: &Landscape, x: &[f64]) -> Result<Vec<f64>, GeometryError> {
    landscape.riemannian_gradient(x)
}

pub fn distance(manifold: &Manifold, x: &[f64], y: &[f64]) -> f64 {
    manifold.distance(x, y)
}

/// Rejection sampler for the density restricted to a chart ball.
#[derive(Clone, Debug)]
pub struct BallSampler<'a> {
    landscape: &'a Landscape,
    center: Vec<f64>,
    radius: f64,
    envelope: Option<f64>,
}

/// Proposals per accepted draw before giving up (acceptance below 1e-4).
pub const MAX_REJECTIONS: usize = 10_000;
const ENVELOPE_PROBES: usize = 512;
const ENVELOPE_SAFETY: f64 = 1.5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SamplerStats {
    pub proposals: usize,
    pub accepted: usize,
}

impl<'a> BallSampler<'a> {
    pub fn new(landscape: &'a Landscape, center: &[f64], radius: f64) -> Result<Self, GeometryError> {
        let n = landscape.dim();
        if center.len() != n {
            return Err(GeometryError::DimensionMismatch { expected: n, found: center.len() });
        }
        if !(radius > 0.0 && radius < landscape.manifold.injectivity_radius()) {
            return Err(GeometryError::BallTooLarge { radius });
        }
        let mut sampler = Self { landscape, center: landscape.manifold.wrapped(center), radius, envelope: None };
        if !landscape.density_is_constant() {
            // probe the ball on a fixed stream to bound the density
            let mut rng = SeedStream::new(0x5eed).substream(&[]);
            let mut max = landscape.density_at(&sampler.center)?;
            let mut probes = 0;
            while probes < ENVELOPE_PROBES {
                if let Some(x) = sampler.propose(&mut rng) {
                    max = max.max(landscape.density_at(&x)?);
                    probes += 1;
                }
            }
            sampler.envelope = Some(max * ENVELOPE_SAFETY);
        }
        Ok(sampler)
    }

    /// Uniform proposal in the ball (clipped to the box), or `None` if rejected.
    fn propose(&self, rng: &mut StreamRng) -> Option<Vec<f64>> {
        let u: Vec<f64> = (0..self.center.len()).map(|_| rng.random_range(-self.radius..=self.radius)).collect();
        if crate::linalg::norm(&u) > self.radius {
            return None;
        }
        let mut x: Vec<f64> = self.center.iter().zip(&u).map(|(c, d)| c + d).collect();
        self.landscape.manifold.wrap(&mut x);
        self.landscape.manifold.contains(&x).then_some(x)
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Result<Vec<f64>, GeometryError> {
        self.sample_with_stats(rng, &mut SamplerStats::default())
    }

    pub fn sample_with_stats(&self, rng: &mut StreamRng, stats: &mut SamplerStats) -> Result<Vec<f64>, GeometryError> {
        for _ in 0..MAX_REJECTIONS {
            stats.proposals += 1;
            let Some(x) = self.propose(rng) else { continue };
            if let Some(envelope) = self.envelope {
                let value = self.landscape.density_at(&x)?;
                if value > envelope {
                    return Err(GeometryError::DensityEnvelope { point: x, value, envelope });
                }
                if rng.random::<f64>() * envelope >= value {
                    continue;
                }
            }
            stats.accepted += 1;
            return Ok(x);
        }
        Err(GeometryError::RejectionOverflow { attempts: MAX_REJECTIONS })
    }
}

/// One draw from the density restricted to `B_delta(p)`.
pub fn sample_ball(landscape: &Landscape, p: &[f64], delta: f64, rng: &mut StreamRng) -> Result<Vec<f64>, GeometryError> {
    BallSampler::new(landscape, p, delta)?.sample(rng)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceReport {
    /// Smallest `<grad F, outward normal>` seen; positive means descent points inward.
    pub min_margin: f64,
    pub worst_point: Vec<f64>,
    pub samples: usize,
}

/// Samples every face of a box and checks that `-grad F` points strictly inward.
pub fn check_invariance(landscape: &Landscape, samples_per_face: usize) -> Result<InvarianceReport, GeometryError> {
    let Manifold::Box { lower, upper } = &landscape.manifold else {
        return Err(GeometryError::NotABox);
    };
    let n = lower.len();
    let mut rng = SeedStream::new(0xb0c5).substream(&[]);
    let mut report = InvarianceReport { min_margin: f64::INFINITY, worst_point: vec![], samples: 0 };
    let per_face = if n == 1 { 1 } else { samples_per_face.max(1) };
    for axis in 0..n {
        for (bound, sign) in [(lower[axis], -1.0), (upper[axis], 1.0)] {
            for _ in 0..per_face {
                let x: Vec<f64> = (0..n)
                    .map(|k| if k == axis { bound } else { rng.random_range(lower[k]..=upper[k]) })
                    .collect();
                let g = landscape.riemannian_gradient(&x)?;
                let margin = sign * g[axis];
                report.samples += 1;
                if margin < report.min_margin {
                    report.min_margin = margin;
                    report.worst_point = x;
                }
            }
        }
    }
    if report.min_margin <= 0.0 {
        return Err(GeometryError::NotInwardFlowing { point: report.worst_point, margin: report.min_margin });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    fn constant_metric(rows: &[f64]) -> MetricField {
        let n = (rows.len() as f64).sqrt() as usize;
        MetricField::constant(&DMatrix::from_row_slice(n, n, rows)).unwrap()
    }

    fn landscape(src: &str, manifold: Manifold, metric: MetricField) -> Landscape {
        let f = ScalarField::parse(src, manifold.dim()).unwrap();
        Landscape::new(manifold, f, metric, Density::Riemannian, ToleranceSet::default()).unwrap()
    }

    #[test]
    fn identity_metric_gradient_is_differential() {
        let l = landscape("cos(x1)", Manifold::torus(vec![TAU]).unwrap(), MetricField::Identity);
        let g = l.riemannian_gradient(&[PI / 2.0]).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_metric_solve() {
        let l = landscape("2*x1 + 3*x2", Manifold::cube(2, -1.0, 1.0).unwrap(), constant_metric(&[4.0, 0.0, 0.0, 1.0]));
        let g = l.riemannian_gradient(&[0.1, 0.2]).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn coupled_metric_solve() {
        let l = landscape("x1", Manifold::cube(2, -1.0, 1.0).unwrap(), constant_metric(&[2.0, 1.0, 1.0, 2.0]));
        let g = l.riemannian_gradient(&[0.0, 0.0]).unwrap();
        // inverse of [[2,1],[1,2]] is [[2,-1],[-1,2]]/3
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-15 && (g[1] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn indefinite_metric_is_a_hard_error() {
        let l = landscape("x1", Manifold::cube(2, -1.0, 1.0).unwrap(), constant_metric(&[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(l.riemannian_gradient(&[0.0, 0.0]), Err(GeometryError::MetricNotSpd { .. })));
    }

    #[test]
    fn asymmetric_metric_rejected() {
        let e = |s: &str| ScalarField::parse(s, 2).unwrap();
        let err = MetricField::from_entries(2, vec![e("1"), e("x1"), e("x2"), e("1")]).unwrap_err();
        assert_eq!(err, GeometryError::MetricNotSymmetric { i: 1, j: 2 });
    }

    #[test]
    fn minimum_image_distance() {
        let t = Manifold::torus(vec![TAU, TAU]).unwrap();
        assert!((t.distance(&[0.1, 0.0], &[TAU - 0.1, 0.0]) - 0.2).abs() < 1e-12);
        assert_eq!(t.distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let b = Manifold::cube(2, -10.0, 10.0).unwrap();
        assert_eq!(b.distance(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
    }

    #[test]
    fn wrap_normalizes_into_period() {
        let t = Manifold::torus(vec![TAU]).unwrap();
        let mut x = [-1e-18];
        t.wrap(&mut x);
        assert!(x[0] >= 0.0 && x[0] < TAU);
        let mut x = [3.0 * TAU + 0.5];
        t.wrap(&mut x);
        assert!((x[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_manifolds() {
        assert!(Manifold::torus(vec![1.0, 0.0]).is_err());
        assert!(Manifold::new_box(vec![1.0], vec![1.0]).is_err());
        assert!(Manifold::circle(-1.0).is_err());
    }

    #[test]
    fn bowl_on_box_is_inward() {
        let l = landscape("x1^2 + 2*x2^2", Manifold::cube(2, -1.0, 1.0).unwrap(), MetricField::Identity);
        let r = check_invariance(&l, 64).unwrap();
        // on the face x1 = 1 the outward component of grad F is 2 x1 Q11 = 2
        assert!(r.min_margin >= 2.0 - 1e-12, "{r:?}");
    }

    #[test]
    fn outward_flow_is_rejected() {
        let l = landscape("x1", Manifold::cube(2, -1.0, 1.0).unwrap(), MetricField::Identity);
        assert!(matches!(check_invariance(&l, 16), Err(GeometryError::NotInwardFlowing { .. })));
        let quad = Landscape::from_builtin("box_quad").unwrap();
        assert!(matches!(check_invariance(&quad, 16), Err(GeometryError::NotInwardFlowing { .. })));
        let quartic = Landscape::from_builtin("box_quartic").unwrap();
        assert!(check_invariance(&quartic, 256).unwrap().min_margin > 0.0);
        let line = Landscape::from_builtin("line_3min").unwrap();
        assert!(check_invariance(&line, 1).unwrap().min_margin > 0.0);
    }

    #[test]
    fn invariance_needs_a_box() {
        let t = Landscape::from_builtin("torus2_sep").unwrap();
        assert_eq!(check_invariance(&t, 8).unwrap_err(), GeometryError::NotABox);
    }

    #[test]
    fn sampling_is_deterministic_and_centered() {
        let l = Landscape::from_builtin("torus2_skew").unwrap();
        let s = SeedStream::new(42);
        let sampler = BallSampler::new(&l, &[1.0, 1.0], 0.1).unwrap();
        let a = sampler.sample(&mut s.substream(&[3])).unwrap();
        let b = sampler.sample(&mut s.substream(&[3])).unwrap();
        assert_eq!(a, b);
        let n = 20_000;
        let mut mean = [0.0; 2];
        for i in 0..n {
            let x = sampler.sample(&mut s.substream(&[i])).unwrap();
            assert!(l.manifold.distance(&x, &[1.0, 1.0]) <= 0.1);
            mean[0] += x[0] / n as f64;
            mean[1] += x[1] / n as f64;
        }
        // std of each coordinate is delta/2, so 5 sigma of the mean is ~ 0.0018
        assert!((mean[0] - 1.0).abs() < 2e-3 && (mean[1] - 1.0).abs() < 2e-3, "{mean:?}");
    }

    #[test]
    fn acceptance_ratio_approaches_disk_over_square() {
        let l = landscape(
            "x1",
            Manifold::cube(2, -1.0, 1.0).unwrap(),
            MetricField::Matrix {
                dim: 2,
                entries: ["1 + 0.1*x1^2", "0", "0", "1"].iter().map(|s| ScalarField::parse(s, 2).unwrap()).collect(),
            },
        );
        let sampler = BallSampler::new(&l, &[0.0, 0.0], 1e-3).unwrap();
        let mut stats = SamplerStats::default();
        let mut rng = SeedStream::new(1).substream(&[]);
        for _ in 0..20_000 {
            sampler.sample_with_stats(&mut rng, &mut stats).unwrap();
        }
        // density is nearly constant on the tiny ball, so only the disk test
        // and the 1/1.5 envelope factor reject
        let ratio = stats.accepted as f64 / stats.proposals as f64 * ENVELOPE_SAFETY;
        assert!((ratio - PI / 4.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn ball_must_fit_in_chart() {
        let l = Landscape::from_builtin("torus2_skew").unwrap();
        assert!(matches!(BallSampler::new(&l, &[0.0, 0.0], 4.0), Err(GeometryError::BallTooLarge { .. })));
    }

    #[test]
    fn pathological_density_overflows() {
        let manifold = Manifold::cube(2, -1.0, 1.0).unwrap();
        let f = ScalarField::parse("x1", 2).unwrap();
        // a spike at the center, essentially zero elsewhere
        let d = ScalarField::parse("exp(-1e7*(x1^2 + x2^2)) + 1e-300", 2).unwrap();
        let l = Landscape::new(manifold, f, MetricField::Identity, Density::Field(d), ToleranceSet::default()).unwrap();
        let sampler = BallSampler::new(&l, &[0.0, 0.0], 0.5).unwrap();
        let r = sampler.sample(&mut SeedStream::new(3).substream(&[]));
        assert!(matches!(r, Err(GeometryError::RejectionOverflow { .. })), "{r:?}");
    }

    proptest! {
        #[test]
        fn gradient_satisfies_defining_identity(x in proptest::array::uniform2(-1.0f64..1.0), v in proptest::array::uniform2(-1.0f64..1.0)) {
            let metric = MetricField::from_entries(2, ["2 + cos(x1)", "0.3*sin(x2)", "0.3*sin(x2)", "1.5 + 0.2*x1*x2"]
                .iter().map(|s| ScalarField::parse(s, 2).unwrap()).collect()).unwrap();
            let l = landscape("sin(x1)*cos(2*x2) + x1^3", Manifold::cube(2, -1.0, 1.0).unwrap(), metric);
            let grad = l.riemannian_gradient(&x).unwrap();
            let g = l.metric.matrix_at(&x).unwrap();
            let (_, df) = l.field.gradient(&x).unwrap();
            let lhs = (DVector::from_column_slice(&v).transpose() * &g * DVector::from_column_slice(&grad))[(0, 0)];
            let rhs = crate::linalg::dot(&df, &v);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }

        #[test]
        fn periodic_distance_is_a_metric(a in proptest::array::uniform2(0.0f64..TAU), b in proptest::array::uniform2(0.0f64..TAU), c in proptest::array::uniform2(0.0f64..TAU)) {
            let t = Manifold::torus(vec![TAU, TAU]).unwrap();
            let (ab, bc, ac) = (t.distance(&a, &b), t.distance(&b, &c), t.distance(&a, &c));
            prop_assert!((ab - t.distance(&b, &a)).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(ab <= PI * 2f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn uniform_ball_passes_sector_chi_square() {
        let l = Landscape::from_builtin("torus2_skew").unwrap();
        let sampler = BallSampler::new(&l, &[2.0, 2.0], 0.3).unwrap();
        let s = SeedStream::new(2024);
        let n = 20_000;
        let mut counts = [0usize; 8];
        for i in 0..n {
            let x = sampler.sample(&mut s.substream(&[i])).unwrap();
            let d = l.manifold.displacement(&[2.0, 2.0], &x);
            let angle = d[1].atan2(d[0]) + PI;
            counts[((angle / TAU * 8.0) as usize).min(7)] += 1;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 7 degrees of freedom, significance 0.001
        assert!(chi2 < 24.322, "chi2 = {chi2}, counts = {counts:?}");
    }
}
