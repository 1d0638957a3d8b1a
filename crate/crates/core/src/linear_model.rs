//! The diagonal linear system `z' = diag(lambda) z` near a simple maximum:
//! closed-form flow, limit directions, the cap region and its boundary
//! functions, and Monte Carlo volume ratios.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::norm;
use crate::rng::{SeedStream, StreamRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinearError {
    #[error("invalid diagonal system: {0}")]
    InvalidSystem(String),
    #[error("limit direction is undefined at the origin")]
    Undefined,
    #[error("point of norm {norm} is outside the disc of radius {rho}")]
    OutOfDomain { norm: f64, rho: f64 },
    #[error("point of norm {norm} is never reached from the cap boundary (rho = {rho})")]
    NotReached { norm: f64, rho: f64 },
    #[error("expected a vector of length {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("only {hits} hits at delta = {delta}; need at least {needed}")]
    InsufficientSamples { delta: f64, hits: usize, needed: usize },
    #[error("invalid delta list: {0}")]
    InvalidDeltas(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagonalSystem {
    lambdas: Vec<f64>,
    r: f64,
    r0: f64,
    rho: f64,
}

const DOMAIN_SLACK: f64 = 1e-12;

impl DiagonalSystem {
    /// `lambda_1 < lambda_2 <= ... <= lambda_n < 0` and `0 < r0 < r`.
    pub fn new(lambdas: Vec<f64>, r: f64, r0: f64) -> Result<Self, LinearError> {
        let bad = |m: &str| Err(LinearError::InvalidSystem(m.to_string()));
        if lambdas.len() < 2 {
            return bad("need at least two eigenvalues");
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l < 0.0)) {
            return bad("all eigenvalues must be negative");
        }
        if lambdas.windows(2).any(|w| w[0] > w[1]) {
            return bad("eigenvalues must be sorted ascending");
        }
        if lambdas[0] >= lambdas[1] {
            return bad("lambda_1 must be strictly below lambda_2");
        }
        if !(r.is_finite() && r0 > 0.0 && r0 < r) {
            return bad("need 0 < r0 < r");
        }
        Ok(Self { rho: (r * r - r0 * r0).sqrt(), lambdas, r, r0 })
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `lambda_1 / lambda_2 > 1`.
    pub fn ratio(&self) -> f64 {
        self.lambdas[0] / self.lambdas[1]
    }

    pub fn flow(&self, z0: &[f64], t: f64) -> Vec<f64> {
        z0.iter().zip(&self.lambdas).map(|(z, l)| (l * t).exp() * z).collect()
    }

    /// Limit of `z(t)/|z(t)|` as `t -> infinity`: the slowest surviving
    /// mode wins, ties among equal eigenvalues keep their mixture.
    pub fn limit_tangent(&self, z0: &[f64]) -> Result<Vec<f64>, LinearError> {
        self.check_len(z0, self.dim())?;
        let j = (0..self.dim()).rev().find(|&i| z0[i] != 0.0).ok_or(LinearError::Undefined)?;
        let slow = self.lambdas[j];
        let mut out: Vec<f64> = z0.iter().zip(&self.lambdas).map(|(z, l)| if *l == slow { *z } else { 0.0 }).collect();
        let s = norm(&out);
        out.iter_mut().for_each(|v| *v /= s);
        Ok(out)
    }

    fn check_len(&self, v: &[f64], expected: usize) -> Result<(), LinearError> {
        if v.len() != expected {
            return Err(LinearError::DimensionMismatch { expected, found: v.len() });
        }
        Ok(())
    }

    /// `(|w|/rho)^(lambda_1/lambda_2) r0`.
    pub fn f_upper(&self, w: &[f64]) -> Result<f64, LinearError> {
        self.check_len(w, self.dim() - 1)?;
        let s = norm(w);
        if s > self.rho * (1.0 + DOMAIN_SLACK) {
            return Err(LinearError::OutOfDomain { norm: s, rho: self.rho });
        }
        Ok((s / self.rho).min(1.0).powf(self.ratio()) * self.r0)
    }

    /// Time after which the flow of the cap boundary passes over `w`:
    /// the root of `sum w_i^2 exp(-2 lambda_i t) = rho^2`.
    pub fn exit_time(&self, w: &[f64]) -> Result<f64, LinearError> {
        self.check_len(w, self.dim() - 1)?;
        let s = norm(w);
        if s > self.rho * (1.0 + DOMAIN_SLACK) {
            return Err(LinearError::NotReached { norm: s, rho: self.rho });
        }
        if s == 0.0 {
            return Ok(f64::INFINITY);
        }
        if s >= self.rho {
            return Ok(0.0);
        }
        let log_ratio = (self.rho / s).ln();
        let slow = &self.lambdas[1..];
        let mut lo = log_ratio / slow[0].abs();
        let mut hi = log_ratio / slow[slow.len() - 1].abs();
        if lo == hi {
            return Ok(lo);
        }
        let rho2 = self.rho * self.rho;
        let h = |t: f64| w.iter().zip(slow).map(|(wi, l)| wi * wi * (-2.0 * l * t).exp()).sum::<f64>() - rho2;
        while hi - lo > 1e-15 * hi {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if h(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Lower boundary of the invariant region over `w`.
    pub fn f_lower(&self, w: &[f64]) -> Result<f64, LinearError> {
        let t = self.exit_time(w)?;
        if self.dim() == 2 {
            // one transverse mode: closed form
            let s = norm(w).min(self.rho);
            return Ok((s / self.rho).powf(self.ratio()) * self.r0);
        }
        Ok((self.lambdas[0] * t).exp() * self.r0)
    }

    /// Membership in the forward-flow image of the top cap, within the ball of radius `r`.
    pub fn in_invariant_region(&self, z: &[f64]) -> bool {
        if z.len() != self.dim() || norm(z) > self.r {
            return false;
        }
        match self.f_lower(&z[1..]) {
            Ok(fl) => z[0] >= fl,
            Err(_) => false,
        }
    }

    /// Same region with the roles of `z_1 > 0` and `z_1 < 0` exchanged.
    pub fn in_mirror_region(&self, z: &[f64]) -> bool {
        let mut m = z.to_vec();
        m[0] = -m[0];
        self.in_invariant_region(&m)
    }

    /// A point of the cap boundary `{|y| = r, y_1 = r0}` in direction `u`.
    pub fn boundary_point(&self, u: &[f64]) -> Vec<f64> {
        let s = norm(u);
        std::iter::once(self.r0).chain(u.iter().map(|v| v / s * self.rho)).collect()
    }
}

/// Uniform point in the ball of radius `delta` in dimension `n`, restricted to `z_1 >= 0`.
fn half_ball_point(n: usize, delta: f64, z1_max: f64, rng: &mut StreamRng) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..n)
            .map(|i| if i == 0 { rng.random_range(0.0..z1_max) } else { rng.random_range(-delta..delta) })
            .collect();
        if norm(&z) < delta {
            return z;
        }
    }
}

/// Uniform point in the full ball of radius `radius` in dimension `n`.
fn ball_point(n: usize, radius: f64, rng: &mut StreamRng) -> Vec<f64> {
    let mut z = half_ball_point(n, radius, radius, rng);
    if rng.random::<bool>() {
        z[0] = -z[0];
    }
    z
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominationReport {
    pub dim: usize,
    pub samples: usize,
    /// Points where `F_l` exceeds `F_u` by more than the tolerance.
    pub violations: usize,
    pub max_excess: f64,
    /// For `n = 2`: largest gap between the closed form and `e^(lambda_1 t) r0`.
    pub closed_form_deviation: Option<f64>,
}

/// Compares `F_l` with `F_u` at points drawn uniformly from the disc of radius `rho`.
pub fn domination_check(sys: &DiagonalSystem, samples: usize, seed: u64, tol: f64) -> Result<DominationReport, LinearError> {
    let n = sys.dim();
    let stream = SeedStream::new(seed);
    let rows: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.substream(&[i as u64]);
            let w = ball_point(n - 1, sys.rho, &mut rng);
            let (fl, fu) = (sys.f_lower(&w)?, sys.f_upper(&w)?);
            let dev = if n == 2 { ((sys.lambdas[0] * sys.exit_time(&w)?).exp() * sys.r0 - fl).abs() } else { 0.0 };
            Ok((fl - fu, dev))
        })
        .collect::<Result<_, LinearError>>()?;
    Ok(DominationReport {
        dim: n,
        samples,
        violations: rows.iter().filter(|(e, _)| *e > tol).count(),
        max_excess: rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max),
        closed_form_deviation: (n == 2).then(|| rows.iter().map(|r| r.1).fold(0.0, f64::max)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TangentReport {
    pub dim: usize,
    pub samples: usize,
    /// Off-axis starting points whose limit direction is `+-e_1`.
    pub off_axis_principal: usize,
    /// Both axis points `+-r e_1` give `+-e_1`.
    pub axis_principal: bool,
    /// Largest distance between the limit direction and the normalized
    /// velocity at `t = 40 max |1/lambda_i|`.
    pub max_velocity_deviation: f64,
}

impl TangentReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.off_axis_principal == 0 && self.axis_principal && self.max_velocity_deviation <= tol
    }
}

fn is_principal(v: &[f64]) -> bool {
    v[0].abs() == 1.0 && v[1..].iter().all(|x| *x == 0.0)
}

/// Limit directions of the contracting flow from points of the sphere `|z| = r`.
pub fn tangent_check(sys: &DiagonalSystem, samples: usize, seed: u64) -> Result<TangentReport, LinearError> {
    let n = sys.dim();
    let stream = SeedStream::new(seed);
    let t = 40.0 * sys.lambdas.iter().map(|l| 1.0 / l.abs()).fold(0.0, f64::max);
    let rows: Vec<(bool, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.substream(&[i as u64]);
            let mut z = ball_point(n, 1.0, &mut rng);
            while norm(&z) < 1e-3 {
                z = ball_point(n, 1.0, &mut rng);
            }
            let s = norm(&z);
            z.iter_mut().for_each(|v| *v *= sys.r / s);
            let lt = sys.limit_tangent(&z)?;
            let zt = sys.flow(&z, t);
            let vel: Vec<f64> = zt.iter().zip(&sys.lambdas).map(|(a, l)| -l * a).collect();
            let vn = norm(&vel);
            let dev = norm(&vel.iter().zip(&lt).map(|(v, d)| v / vn - d).collect::<Vec<_>>());
            Ok((is_principal(&lt), dev))
        })
        .collect::<Result<_, LinearError>>()?;
    let mut axis_principal = true;
    for sign in [1.0, -1.0] {
        let mut z = vec![0.0; n];
        z[0] = sign * sys.r;
        let lt = sys.limit_tangent(&z)?;
        axis_principal &= is_principal(&lt) && lt[0] == sign;
    }
    Ok(TangentReport {
        dim: n,
        samples,
        off_axis_principal: rows.iter().filter(|r| r.0).count(),
        axis_principal,
        max_velocity_deviation: rows.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

/// `int_0^h (delta^2 - s^2)^((n-1)/2) ds / int_0^delta (...) ds`, by Simpson in
/// the angle `s = delta sin(theta)` where the integrand is smooth.
pub fn slab_fraction(n: usize, delta: f64, h: f64) -> f64 {
    if h >= delta {
        return 1.0;
    }
    let integral = |upper: f64| {
        let m = 2000;
        let step = upper / m as f64;
        let f = |th: f64| th.cos().powi(n as i32);
        let mut acc = f(0.0) + f(upper);
        for k in 1..m {
            acc += f(k as f64 * step) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * step / 3.0
    };
    integral((h / delta).asin()) / integral(std::f64::consts::FRAC_PI_2)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub delta: f64,
    pub ratio: f64,
    pub std_err: f64,
    pub hits: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingEstimate {
    pub rows: Vec<ScalingRow>,
    pub slope: f64,
    pub intercept: f64,
    pub expected: f64,
}

impl ScalingEstimate {
    /// `delta,ratio` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,ratio\n");
        for r in &self.rows {
            out.push_str(&format!("{:?},{:?}\n", r.delta, r.ratio));
        }
        out
    }
}

/// Least-squares line through `(x, y)`: returns `(slope, intercept)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub const MIN_HITS: usize = 100;

pub fn validate_deltas(deltas: &[f64], min_len: usize) -> Result<(), LinearError> {
    if deltas.len() < min_len {
        return Err(LinearError::InvalidDeltas(format!("need at least {min_len} entries")));
    }
    if deltas.iter().any(|d| !(d.is_finite() && *d > 0.0)) || deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LinearError::InvalidDeltas("entries must be positive and strictly decreasing".into()));
    }
    Ok(())
}

/// Fraction of the upper half ball `B+_delta` under the graph of `F_u`, per
/// delta, and the fitted exponent of its power law.
///
/// Hits only occur below `h = min(delta, F_u(delta))`, so points are drawn
/// from that slab and the slab's share of the half ball is applied exactly.
pub fn scaling_exponent_estimate(
    sys: &DiagonalSystem,
    deltas: &[f64],
    samples: usize,
    seed: u64,
) -> Result<ScalingEstimate, LinearError> {
    validate_deltas(deltas, 4)?;
    if deltas[0] > sys.rho {
        return Err(LinearError::InvalidDeltas(format!("largest delta exceeds rho = {}", sys.rho)));
    }
    let n = sys.dim();
    let stream = SeedStream::new(seed);
    let mut rows = Vec::with_capacity(deltas.len());
    for (k, &delta) in deltas.iter().enumerate() {
        let mut edge = vec![0.0; n - 1];
        edge[0] = delta;
        let h = sys.f_upper(&edge)?.min(delta);
        let hits: usize = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.substream(&[k as u64, i as u64]);
                let z = half_ball_point(n, delta, h, &mut rng);
                usize::from(z[0] < sys.f_upper(&z[1..]).unwrap_or(0.0))
            })
            .sum();
        if hits < MIN_HITS {
            return Err(LinearError::InsufficientSamples { delta, hits, needed: MIN_HITS });
        }
        let share = slab_fraction(n, delta, h);
        let p = hits as f64 / samples as f64;
        rows.push(ScalingRow {
            delta,
            ratio: share * p,
            std_err: share * (p * (1.0 - p) / samples as f64).sqrt(),
            hits,
            samples,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.delta.ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.ratio.ln()).collect();
    let (slope, intercept) = fit_line(&x, &y);
    Ok(ScalingEstimate { rows, slope, intercept, expected: sys.ratio() - 1.0 })
}

/// A subset of one half ball used by [`measure_union_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfRegion {
    Whole,
    Empty,
    /// Above the graph of `F_u` (upper half) or below its mirror (lower half).
    OutsideHypograph,
    /// The invariant region, or its mirror in the lower half.
    Invariant,
}

impl HalfRegion {
    fn contains(self, sys: &DiagonalSystem, z: &[f64], upper: bool) -> bool {
        let z1 = if upper { z[0] } else { -z[0] };
        if z1 < 0.0 {
            return false;
        }
        match self {
            HalfRegion::Whole => true,
            HalfRegion::Empty => false,
            HalfRegion::OutsideHypograph => sys.f_upper(&z[1..]).is_ok_and(|fu| z1 >= fu),
            HalfRegion::Invariant => {
                if upper {
                    sys.in_invariant_region(z)
                } else {
                    sys.in_mirror_region(z)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeasureRow {
    pub delta: f64,
    pub upper_ratio: f64,
    pub lower_ratio: f64,
    pub full_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeasureReport {
    pub rows: Vec<MeasureRow>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks on independent Monte Carlo samples that the full-ball fraction of
/// `V1 u V2` is the mean of the half-ball fractions, never falls below the
/// smaller of them, and does not decrease from the largest to the smallest delta.
pub fn measure_union_check(
    sys: &DiagonalSystem,
    upper: HalfRegion,
    lower: HalfRegion,
    deltas: &[f64],
    samples: usize,
    seed: u64,
    tolerance: f64,
) -> Result<MeasureReport, LinearError> {
    validate_deltas(deltas, 2)?;
    let n = sys.dim();
    let stream = SeedStream::new(seed);
    let fraction = |k: usize, part: u64, delta: f64, test: &(dyn Fn(&[f64]) -> bool + Sync)| -> f64 {
        let hits: usize = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.substream(&[k as u64, part, i as u64]);
                let mut z = half_ball_point(n, delta, delta, &mut rng);
                if part == 2 && rng.random::<bool>() {
                    z[0] = -z[0];
                }
                if part == 1 {
                    z[0] = -z[0];
                }
                usize::from(test(&z))
            })
            .sum();
        hits as f64 / samples as f64
    };
    let mut rows = Vec::new();
    for (k, &delta) in deltas.iter().enumerate() {
        let upper_ratio = fraction(k, 0, delta, &|z| upper.contains(sys, z, true));
        let lower_ratio = fraction(k, 1, delta, &|z| lower.contains(sys, z, false));
        let full_ratio = fraction(k, 2, delta, &|z| upper.contains(sys, z, true) || lower.contains(sys, z, false));
        rows.push(MeasureRow { delta, upper_ratio, lower_ratio, full_ratio });
    }
    let per_delta = rows.iter().all(|r| {
        (r.full_ratio - 0.5 * (r.upper_ratio + r.lower_ratio)).abs() <= tolerance
            && r.full_ratio >= r.upper_ratio.min(r.lower_ratio) - tolerance
    });
    let trend = rows.last().unwrap().full_ratio >= rows[0].full_ratio - tolerance;
    Ok(MeasureReport { rows, tolerance, passed: per_delta && trend })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sys2() -> DiagonalSystem {
        DiagonalSystem::new(vec![-2.0, -1.0], 2f64.sqrt(), 1.0).unwrap()
    }

    #[test]
    fn domination_and_tangent_reports() {
        for lambdas in [vec![-2.0, -1.0], vec![-3.0, -2.0, -1.0], vec![-4.0, -3.0, -2.0, -1.0]] {
            let sys = DiagonalSystem::new(lambdas, 1.0, 0.5).unwrap();
            let d = domination_check(&sys, 500, 1, 1e-9).unwrap();
            assert_eq!(d.violations, 0, "{d:?}");
            if sys.dim() == 2 {
                assert!(d.closed_form_deviation.unwrap() <= 1e-12, "{d:?}");
            }
            let t = tangent_check(&sys, 300, 2).unwrap();
            assert!(t.passes(1e-8), "{t:?}");
        }
    }

    #[test]
    fn rejects_bad_systems() {
        assert!(DiagonalSystem::new(vec![-1.0, -1.0], 1.0, 0.5).is_err());
        assert!(DiagonalSystem::new(vec![-2.0, 1.0], 1.0, 0.5).is_err());
        assert!(DiagonalSystem::new(vec![-1.0, -2.0], 1.0, 0.5).is_err());
        assert!(DiagonalSystem::new(vec![-2.0, -1.0], 1.0, 1.0).is_err());
        assert!(DiagonalSystem::new(vec![-3.0, -1.0, -1.0], 1.0, 0.5).is_ok());
    }

    #[test]
    fn closed_form_flow() {
        let s = sys2();
        let z = s.flow(&[1.0, 1.0], 2f64.ln());
        assert!((z[0] - 0.25).abs() < 1e-16 && (z[1] - 0.5).abs() < 1e-16);
        assert_eq!(s.flow(&[0.3, -0.7], 0.0), vec![0.3, -0.7]);
        let two = s.flow(&s.flow(&[0.3, -0.7], 0.8), 0.8);
        let once = s.flow(&[0.3, -0.7], 1.6);
        for (a, b) in two.iter().zip(&once) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn limit_tangents() {
        let s = sys2();
        assert_eq!(s.limit_tangent(&[s.r(), 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(s.limit_tangent(&[-1.0, 0.0]).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(s.limit_tangent(&[1.0, 0.001]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(s.limit_tangent(&[0.0, 0.0]), Err(LinearError::Undefined));
        let tied = DiagonalSystem::new(vec![-3.0, -1.0, -1.0], 1.0, 0.5).unwrap();
        let v = tied.limit_tangent(&[1.0, 3.0, 4.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.6, 0.8]);
    }

    #[test]
    fn boundary_function_values() {
        let s = DiagonalSystem::new(vec![-2.0, -1.0], 2f64.sqrt(), 1.0).unwrap();
        assert!((s.rho() - 1.0).abs() < 1e-15);
        assert!((s.f_upper(&[0.5]).unwrap() - 0.25).abs() < 1e-15);
        assert!((s.f_lower(&[0.5]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(s.f_upper(&[0.0]).unwrap(), 0.0);
        assert_eq!(s.f_lower(&[0.0]).unwrap(), 0.0);
        assert!((s.f_upper(&[1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((s.f_lower(&[-1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(s.f_upper(&[1.1]), Err(LinearError::OutOfDomain { .. })));
        assert!(matches!(s.f_lower(&[1.1]), Err(LinearError::NotReached { .. })));
    }

    #[test]
    fn axis_and_cap_membership() {
        let s = DiagonalSystem::new(vec![-3.0, -2.0, -1.0], 1.0, 0.6).unwrap();
        for z1 in [1e-9, 0.3, 0.7, 1.0] {
            assert!(s.in_invariant_region(&[z1, 0.0, 0.0]));
        }
        let cap = [0.8, 0.36, 0.48];
        assert!((norm(&cap) - 1.0).abs() < 1e-15);
        assert!(s.in_invariant_region(&cap));
        let w = [0.1, -0.2];
        let fl = s.f_lower(&w).unwrap();
        assert!(s.in_invariant_region(&[fl + 1e-6, w[0], w[1]]));
        assert!(!s.in_invariant_region(&[fl - 1e-6, w[0], w[1]]));
        assert!(!s.in_invariant_region(&[-0.1, 0.0, 0.0]));
    }

    #[test]
    fn slab_fraction_matches_disc_geometry() {
        // n = 2: (h sqrt(d^2-h^2) + d^2 asin(h/d)) / (pi d^2 / 2)
        let (d, h) = (0.3f64, 0.1f64);
        let exact = (h * (d * d - h * h).sqrt() + d * d * (h / d).asin()) / (std::f64::consts::PI * d * d / 2.0);
        assert!((slab_fraction(2, d, h) - exact).abs() < 1e-12);
        assert_eq!(slab_fraction(3, d, 1.0), 1.0);
    }

    #[test]
    fn whole_and_empty_regions() {
        let s = sys2();
        let whole = measure_union_check(&s, HalfRegion::Whole, HalfRegion::Whole, &[0.2, 0.1], 2000, 1, 0.01).unwrap();
        assert!(whole.passed && whole.rows.iter().all(|r| r.full_ratio == 1.0));
        let empty = measure_union_check(&s, HalfRegion::Empty, HalfRegion::Empty, &[0.2, 0.1], 2000, 1, 0.01).unwrap();
        assert!(empty.passed && empty.rows.iter().all(|r| r.full_ratio == 0.0));
    }

    #[test]
    fn scaling_needs_hits_and_valid_deltas() {
        let s = DiagonalSystem::new(vec![-2.0, -1.0], 1.0, 0.5).unwrap();
        assert!(matches!(scaling_exponent_estimate(&s, &[0.2, 0.1, 0.05], 1000, 0), Err(LinearError::InvalidDeltas(_))));
        assert!(matches!(scaling_exponent_estimate(&s, &[0.2, 0.1, 0.1, 0.05], 1000, 0), Err(LinearError::InvalidDeltas(_))));
        assert!(matches!(
            scaling_exponent_estimate(&s, &[0.2, 0.1, 0.05, 0.025], 50, 0),
            Err(LinearError::InsufficientSamples { .. })
        ));
    }

    /// Exact half-disc fraction under the graph, by composite Simpson in `w`.
    fn quadrature_ratio(s: &DiagonalSystem, delta: f64) -> f64 {
        let m = 20_000;
        let step = 2.0 * delta / m as f64;
        let f = |w: f64| s.f_upper(&[w]).unwrap().min((delta * delta - w * w).max(0.0).sqrt());
        let mut acc = f(-delta) + f(delta);
        for k in 1..m {
            acc += f(-delta + k as f64 * step) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * step / 3.0 / (std::f64::consts::PI * delta * delta / 2.0)
    }

    #[test]
    fn scaling_slope_matches_quadrature() {
        let deltas = [0.2, 0.1, 0.05, 0.025];
        for (lambda1, r0, tol) in [(-2.0, 0.5, 0.1), (-3.0, 0.9, 0.15)] {
            let s = DiagonalSystem::new(vec![lambda1, -1.0], 1.0, r0).unwrap();
            let est = scaling_exponent_estimate(&s, &deltas, 100_000, 7).unwrap();
            let exact: Vec<f64> = deltas.iter().map(|d| quadrature_ratio(&s, *d)).collect();
            for (row, e) in est.rows.iter().zip(&exact) {
                assert!((row.ratio - e).abs() <= 5.0 * row.std_err, "{row:?} vs {e}");
            }
            let logs: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
            let (exact_slope, _) = fit_line(&logs, &exact.iter().map(|e| e.ln()).collect::<Vec<_>>());
            assert!((exact_slope - est.expected).abs() < tol, "{exact_slope}");
            assert!((est.slope - est.expected).abs() < tol, "{}", est.slope);
            assert!(est.rows.windows(2).all(|w| w[1].ratio < w[0].ratio));
        }
    }

    fn system_strategy() -> impl Strategy<Value = DiagonalSystem> {
        (2usize..5, proptest::collection::vec(0.1f64..3.0, 4), 0.1f64..0.9).prop_map(|(n, mut mags, frac)| {
            mags.truncate(n);
            mags.sort_by(|a, b| b.total_cmp(a));
            mags[0] += 0.05;
            DiagonalSystem::new(mags.iter().map(|m| -m).collect(), 1.0, frac).unwrap()
        })
    }

    proptest! {
        #[test]
        fn lower_is_dominated_by_upper(s in system_strategy(), dir in proptest::collection::vec(-1.0f64..1.0, 3), frac in 0.0f64..1.0) {
            let n = s.dim();
            let mut w: Vec<f64> = dir[..n - 1].to_vec();
            let len = norm(&w);
            prop_assume!(len > 1e-6);
            w.iter_mut().for_each(|v| *v *= frac * s.rho() / len);
            let (fl, fu) = (s.f_lower(&w).unwrap(), s.f_upper(&w).unwrap());
            prop_assert!(fl <= fu + 1e-12, "{fl} > {fu}");
            if n == 2 {
                prop_assert!((fl - fu).abs() <= 1e-12);
            }
        }

        #[test]
        fn flowed_boundary_lies_on_the_lower_graph(s in system_strategy(), dir in proptest::collection::vec(-1.0f64..1.0, 3), t in 0.0f64..3.0) {
            let n = s.dim();
            prop_assume!(norm(&dir[..n - 1]) > 1e-3);
            let y = s.boundary_point(&dir[..n - 1]);
            let z = s.flow(&y, t);
            let fl = s.f_lower(&z[1..]).unwrap();
            prop_assert!((z[0] - fl).abs() <= 1e-9, "{} vs {fl}", z[0]);
        }

        #[test]
        fn invariant_region_is_forward_invariant(
            s in system_strategy(),
            dir in proptest::collection::vec(-1.0f64..1.0, 3),
            radial in 0.0f64..1.0,
            height in 0.0f64..0.999,
            t in 0.0f64..5.0,
        ) {
            let n = s.dim();
            let len = norm(&dir[..n - 1]);
            prop_assume!(len > 1e-6);
            // a member between the lower graph and the sphere
            let w: Vec<f64> = dir[..n - 1].iter().map(|v| v / len * radial * s.rho()).collect();
            let fl = s.f_lower(&w).unwrap();
            let top = (s.r() * s.r() - norm(&w).powi(2)).sqrt();
            let z: Vec<f64> = std::iter::once(fl + height * (top - fl)).chain(w).collect();
            prop_assert!(s.in_invariant_region(&z));
            prop_assert!(s.in_invariant_region(&s.flow(&z, t)));
        }

        #[test]
        fn limit_tangent_matches_velocity_limit(raw in proptest::collection::vec(-1.0f64..1.0, 4), n in 2usize..5) {
            let lambdas: Vec<f64> = (0..n).map(|i| -((n - i) as f64)).collect();
            let s = DiagonalSystem::new(lambdas.clone(), 1.0, 0.5).unwrap();
            let z0 = &raw[..n];
            prop_assume!(norm(z0) > 1e-3 && z0[n - 1].abs() > 1e-3);
            let t = 40.0 * lambdas.iter().map(|l| 1.0 / l.abs()).fold(0.0, f64::max);
            let z = s.flow(z0, t);
            let v: Vec<f64> = z.iter().zip(&lambdas).map(|(zi, l)| -l * zi).collect();
            let vn = norm(&v);
            let expected = s.limit_tangent(z0).unwrap();
            for (a, b) in v.iter().zip(&expected) {
                prop_assert!((a / vn - b).abs() <= 1e-8);
            }
        }
    }
}
