//! Gradient descent and ascent trajectories, basin classification and
//! principal flow lines.

mod rk;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::critical::{CriticalSet, Kind};
use crate::geometry::{GeometryError, Landscape};
use crate::linalg;
use rk::{Control, Dopri5, RunEnd};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("step size {step:e} underflowed at t = {t} near {point:?}")]
    StepUnderflow { t: f64, point: Vec<f64>, step: f64 },
    #[error("trajectory left the box at t = {t}: {point:?}")]
    LeftDomain { t: f64, point: Vec<f64> },
    #[error("descent from {point:?} did not converge before t_max")]
    Unresolved { point: Vec<f64> },
    #[error("critical point {0} is not a simple maximum")]
    NotSimple(usize),
    #[error("seed offset {eps:e} exceeds half the distance {limit:e} to the nearest critical point")]
    SeedTooLarge { eps: f64, limit: f64 },
    #[error("critical set is empty")]
    EmptyCriticalSet,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Converged(usize),
    TimedOut,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub terminal: Terminal,
    pub total_time: f64,
    /// Largest step-to-step move of F against the flow direction.
    pub monotonicity_margin: f64,
    pub steps: usize,
    pub final_point: Vec<f64>,
}

impl Trajectory {
    /// `t,x1..xn,F` per accepted step.
    pub fn to_csv(&self) -> String {
        let n = self.final_point.len();
        let mut out = String::from("t");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        out.push_str(",F\n");
        for ((t, x), f) in self.times.iter().zip(&self.states).zip(&self.values) {
            let _ = write!(out, "{t:?}");
            for v in x {
                let _ = write!(out, ",{v:?}");
            }
            let _ = writeln!(out, ",{f:?}");
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IntegrateOptions {
    /// Keep every accepted step (otherwise only the endpoint).
    pub record: bool,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self { record: true }
    }
}

fn signed_gradient(landscape: &Landscape, direction: Direction) -> impl Fn(&[f64], &mut [f64]) -> Result<(), FlowError> + '_ {
    let sign = match direction {
        Direction::Descent => -1.0,
        Direction::Ascent => 1.0,
    };
    move |x, out| {
        landscape.riemannian_gradient_into(x, out)?;
        out.iter_mut().for_each(|v| *v *= sign);
        Ok(())
    }
}

fn solver(landscape: &Landscape) -> Dopri5 {
    let t = &landscape.tolerances;
    Dopri5::new(landscape.dim(), t.ode_rel_tol, t.ode_abs_tol, t.t_max)
}

/// Integrates `x' = -grad F` (or `+grad F`) until the convergence event:
/// within `capture_radius` of a critical point with `|grad F| <= 10 grad_tol`.
pub fn integrate(landscape: &Landscape, x0: &[f64], direction: Direction, critset: &CriticalSet) -> Result<Trajectory, FlowError> {
    integrate_with(landscape, x0, direction, critset, IntegrateOptions::default())
}

pub fn integrate_with(
    landscape: &Landscape,
    x0: &[f64],
    direction: Direction,
    critset: &CriticalSet,
    options: IntegrateOptions,
) -> Result<Trajectory, FlowError> {
    if critset.is_empty() {
        return Err(FlowError::EmptyCriticalSet);
    }
    let tol = landscape.tolerances;
    let manifold = &landscape.manifold;
    let x0 = manifold.wrapped(x0);
    let against = match direction {
        Direction::Descent => 1.0,
        Direction::Ascent => -1.0,
    };
    let mut traj = Trajectory {
        times: vec![],
        states: vec![],
        values: vec![],
        terminal: Terminal::TimedOut,
        total_time: 0.0,
        monotonicity_margin: f64::NEG_INFINITY,
        steps: 0,
        final_point: x0.clone(),
    };
    let mut last_value: Option<f64> = None;
    let mut rk = solver(landscape);
    let end = rk.run(
        &x0,
        signed_gradient(landscape, direction),
        &|x| manifold.wrap(x),
        None,
        |t, x, f| {
            if !manifold.contains(x) {
                return Err(FlowError::LeftDomain { t, point: x.to_vec() });
            }
            let value = landscape.value(x)?;
            if let Some(prev) = last_value {
                traj.monotonicity_margin = traj.monotonicity_margin.max(against * (value - prev));
            }
            last_value = Some(value);
            traj.steps += 1;
            if options.record {
                traj.times.push(t);
                traj.states.push(x.to_vec());
                traj.values.push(value);
            }
            traj.final_point.copy_from_slice(x);
            traj.total_time = t;
            if linalg::norm(f) <= 10.0 * tol.grad_tol {
                if let Some((id, d)) = critset.nearest(manifold, x) {
                    if d <= tol.capture_radius {
                        traj.terminal = Terminal::Converged(id);
                        return Ok(Control::Stop);
                    }
                }
            }
            Ok(Control::Continue)
        },
    )?;
    if let RunEnd::TimedOut { t } = end {
        traj.total_time = t;
    }
    Ok(traj)
}

/// Terminal critical point of the descent from `x`.
pub fn classify_point(landscape: &Landscape, x: &[f64], critset: &CriticalSet) -> Result<usize, FlowError> {
    let traj = integrate_with(landscape, x, Direction::Descent, critset, IntegrateOptions { record: false })?;
    match traj.terminal {
        Terminal::Converged(id) => Ok(id),
        Terminal::TimedOut => Err(FlowError::Unresolved { point: x.to_vec() }),
    }
}

/// Classifies every point in parallel; output order follows input order.
pub fn classify_batch(landscape: &Landscape, points: &[Vec<f64>], critset: &CriticalSet) -> Vec<Result<usize, FlowError>> {
    points.par_iter().map(|x| classify_point(landscape, x, critset)).collect()
}

/// Descends from `x0` until `event(x)` turns non-negative; returns the
/// located crossing point, or `None` if the flow converged or timed out first.
pub fn descend_until(
    landscape: &Landscape,
    x0: &[f64],
    critset: &CriticalSet,
    event: &dyn Fn(&[f64]) -> f64,
) -> Result<Option<Vec<f64>>, FlowError> {
    let tol = landscape.tolerances;
    let manifold = &landscape.manifold;
    let mut rk = solver(landscape);
    let end = rk.run(
        &manifold.wrapped(x0),
        signed_gradient(landscape, Direction::Descent),
        &|x| manifold.wrap(x),
        Some(event),
        |t, x, f| {
            if !manifold.contains(x) {
                return Err(FlowError::LeftDomain { t, point: x.to_vec() });
            }
            if linalg::norm(f) <= 10.0 * tol.grad_tol
                && critset.nearest(manifold, x).is_some_and(|(_, d)| d <= tol.capture_radius)
            {
                return Ok(Control::Stop);
            }
            Ok(Control::Continue)
        },
    )?;
    Ok(match end {
        RunEnd::Event { y, .. } => Some(y),
        _ => None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Sign::Plus => "+",
            Sign::Minus => "-",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum LineOutcome {
    Minimum(usize),
    /// Ended at a saddle (or another maximum): the maximum is not simple.
    NonSimpleSaddleHit(usize),
    Unresolved,
}

#[derive(Clone, Debug, Serialize)]
pub struct PrincipalFlowLine {
    pub maximum: usize,
    pub sign: Sign,
    pub seed_offset: f64,
    pub seed: Vec<f64>,
    pub outcome: LineOutcome,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

impl PrincipalFlowLine {
    pub fn terminal_minimum(&self) -> Option<usize> {
        match self.outcome {
            LineOutcome::Minimum(id) => Some(id),
            _ => None,
        }
    }
}

/// Relative seed offset used when none is given.
pub const DEFAULT_SEED_FRACTION: f64 = 1e-4;

/// Descends from `p +- eps v1` and records where each line ends.
pub fn trace_principal(
    landscape: &Landscape,
    p: usize,
    critset: &CriticalSet,
    seed_offset: Option<f64>,
) -> Result<(PrincipalFlowLine, PrincipalFlowLine), FlowError> {
    let point = critset.get(p);
    let v1 = match (&point.v1, point.kind()) {
        (Some(v), Kind::Maximum) => v.clone(),
        _ => return Err(FlowError::NotSimple(p)),
    };
    let isolation = critset.isolation(&landscape.manifold, p);
    let eps = seed_offset.unwrap_or(DEFAULT_SEED_FRACTION * isolation.min(landscape.manifold.injectivity_radius()));
    if !(eps > 0.0 && eps <= isolation / 2.0) {
        return Err(FlowError::SeedTooLarge { eps, limit: isolation });
    }
    let line = |sign: Sign| -> Result<PrincipalFlowLine, FlowError> {
        let seed: Vec<f64> = point.location.iter().zip(&v1).map(|(x, v)| x + sign.factor() * eps * v).collect();
        let seed = landscape.manifold.wrapped(&seed);
        let trajectory = integrate(landscape, &seed, Direction::Descent, critset)?;
        let outcome = match trajectory.terminal {
            Terminal::Converged(id) if critset.get(id).is_minimum() => LineOutcome::Minimum(id),
            Terminal::Converged(id) => LineOutcome::NonSimpleSaddleHit(id),
            Terminal::TimedOut => LineOutcome::Unresolved,
        };
        Ok(PrincipalFlowLine { maximum: p, sign, seed_offset: eps, seed, outcome, trajectory })
    };
    Ok((line(Sign::Plus)?, line(Sign::Minus)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical::find_critical_points;
    use crate::field::ScalarField;
    use crate::geometry::Manifold;
    use crate::rng::SeedStream;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn setup(name: &str, grid: usize) -> (Landscape, CriticalSet) {
        let l = Landscape::from_builtin(name).unwrap();
        let c = find_critical_points(&l, grid).unwrap();
        (l, c)
    }

    fn rk4_oracle(l: &Landscape, x0: &[f64], dt: f64, t_end: f64) -> Vec<f64> {
        let f = |x: &[f64]| -> Vec<f64> { l.riemannian_gradient(x).unwrap().iter().map(|v| -v).collect() };
        let mut x = x0.to_vec();
        let steps = (t_end / dt).round() as usize;
        for _ in 0..steps {
            let k1 = f(&x);
            let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
            let k2 = f(&x2);
            let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * dt * k).collect();
            let k3 = f(&x3);
            let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
            let k4 = f(&x4);
            for i in 0..x.len() {
                x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        x
    }

    #[test]
    fn descent_from_the_diagonal_reaches_the_minimum() {
        let (l, c) = setup("torus2_sep", 16);
        let traj = integrate(&l, &[FRAC_PI_2, FRAC_PI_2], Direction::Descent, &c).unwrap();
        let Terminal::Converged(id) = traj.terminal else { panic!() };
        assert!(c.get(id).is_minimum());
        assert!(l.manifold.distance(&c.get(id).location, &[PI, PI]) < 1e-12);
        // the fixed-step oracle agrees on the endpoint of a finite window
        let oracle = rk4_oracle(&l, &[FRAC_PI_2, FRAC_PI_2], 1e-4, 5.0);
        let mut short = l.clone();
        short.tolerances.t_max = 5.0;
        let t = integrate(&short, &[FRAC_PI_2, FRAC_PI_2], Direction::Descent, &c).unwrap();
        assert_eq!(t.terminal, Terminal::TimedOut);
        assert!(l.manifold.distance(&t.final_point, &oracle) < 1e-8);
    }

    #[test]
    fn stationary_start_converges_immediately() {
        let (l, c) = setup("torus2_sep", 16);
        let traj = integrate(&l, &[0.0, PI], Direction::Descent, &c).unwrap();
        assert_eq!(traj.steps, 1);
        assert_eq!(traj.terminal, Terminal::Converged(c.nearest(&l.manifold, &[0.0, PI]).unwrap().0));
    }

    #[test]
    fn quadratic_bowl_matches_closed_form() {
        let f = ScalarField::parse("(x1^2 + x2^2)/2", 2).unwrap();
        let mut l = Landscape::euclidean(Manifold::cube(2, -2.0, 2.0).unwrap(), f).unwrap();
        let c = find_critical_points(&l, 4).unwrap();
        l.tolerances.t_max = 1.0;
        let x0 = [0.8, -0.3];
        let traj = integrate(&l, &x0, Direction::Descent, &c).unwrap();
        assert_eq!(traj.total_time, 1.0);
        for (a, b) in traj.final_point.iter().zip(x0) {
            let exact = b * (-1f64).exp();
            assert!((a - exact).abs() <= 1e-9 * exact.abs(), "{a} {exact}");
        }
    }

    #[test]
    fn saddle_stable_manifold_is_classified_to_the_saddle() {
        let (l, c) = setup("torus2_sep", 16);
        let id = classify_point(&l, &[FRAC_PI_2, 0.0], &c).unwrap();
        assert!(l.manifold.distance(&c.get(id).location, &[PI, 0.0]) < 1e-12);
        let min = classify_point(&l, &[PI, PI], &c).unwrap();
        assert!(c.get(min).is_minimum());
    }

    #[test]
    fn principal_lines_of_the_separable_torus_hit_saddles() {
        let (l, c) = setup("torus2_sep", 16);
        let (plus, minus) = trace_principal(&l, 0, &c, None).unwrap();
        for line in [plus, minus] {
            let LineOutcome::NonSimpleSaddleHit(id) = line.outcome else { panic!("{:?}", line.outcome) };
            assert!(l.manifold.distance(&c.get(id).location, &[PI, 0.0]) < 1e-12);
        }
    }

    #[test]
    fn circle_principal_lines_share_the_minimum() {
        let (l, c) = setup("circle_1", 16);
        let (plus, minus) = trace_principal(&l, 0, &c, None).unwrap();
        assert_eq!(plus.terminal_minimum(), Some(1));
        assert_eq!(minus.terminal_minimum(), Some(1));
        assert!(matches!(trace_principal(&l, 1, &c, None), Err(FlowError::NotSimple(1))));
        assert!(matches!(trace_principal(&l, 0, &c, Some(2.0)), Err(FlowError::SeedTooLarge { .. })));
    }

    #[test]
    fn skew_principal_terminals_are_seed_robust() {
        let (l, c) = setup("torus2_skew", 32);
        let tight = l.clone().with_tolerances(l.tolerances.scaled(0.1)).unwrap();
        let reference = trace_principal(&l, 0, &c, None).unwrap();
        for eps in [1e-3, 1e-4, 1e-5] {
            let (p, m) = trace_principal(&tight, 0, &c, Some(eps)).unwrap();
            assert_eq!(p.outcome, reference.0.outcome);
            assert_eq!(m.outcome, reference.1.outcome);
            assert!(p.terminal_minimum().is_some());
        }
    }

    #[test]
    fn descent_is_monotone_and_ascent_avoids_minima() {
        let s = SeedStream::new(11);
        for name in ["torus2_skew", "circle_2", "box_quartic", "line_3min"] {
            let (l, c) = setup(name, 32);
            let margin_bound = |f: f64| 10.0 * l.tolerances.ode_rel_tol * (1.0 + f.abs());
            for i in 0..25 {
                let mut rng = s.substream(&[i]);
                let x: Vec<f64> = (0..l.dim())
                    .map(|k| match &l.manifold {
                        Manifold::Box { lower, upper } => rng.random_range(lower[k]..upper[k]),
                        m => rng.random_range(0.0..m.period(k).unwrap()),
                    })
                    .collect();
                let traj = integrate(&l, &x, Direction::Descent, &c).unwrap();
                let fmax = traj.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(traj.monotonicity_margin <= margin_bound(fmax), "{name}: {}", traj.monotonicity_margin);
                if let Terminal::Converged(id) = traj.terminal {
                    let min = c.get(id);
                    if min.is_minimum() && !l.manifold.is_box() {
                        let near: Vec<f64> = min.location.iter().map(|v| v + 1e-2).collect();
                        let up = integrate(&l, &near, Direction::Ascent, &c).unwrap();
                        let Terminal::Converged(top) = up.terminal else { panic!() };
                        assert!(!c.get(top).is_minimum());
                    }
                }
            }
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let (l, c) = setup("circle_1", 8);
        let traj = integrate(&l, &[2.0], Direction::Descent, &c).unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,x1,F"));
        assert_eq!(lines.count(), traj.steps);
    }

    #[test]
    fn exit_event_on_sphere() {
        let (l, c) = setup("torus2_sep", 16);
        let p = [0.0, 0.0];
        let m = l.manifold.clone();
        let x = descend_until(&l, &[0.01, 0.0], &c, &|x| m.distance(x, &p) - 0.5).unwrap().unwrap();
        assert!((m.distance(&x, &p) - 0.5).abs() < 1e-9);
    }
}
