//! Monte Carlo concentration of basins around the principal terminals of a
//! maximum, and the comparison of its decay with the linear model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critical::{CriticalError, CriticalSet};
use crate::flow::{classify_point, descend_until, trace_principal, FlowError, LineOutcome};
use crate::geometry::{BallSampler, GeometryError, Landscape};
use crate::linalg::norm;
use crate::linear_model::{fit_line, scaling_exponent_estimate, validate_deltas, DiagonalSystem, LinearError};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("maximum {maximum} is not simple: {reason}")]
    NonSimpleInput { maximum: usize, reason: String },
    #[error("{unresolved} of {samples} trajectories unresolved at delta = {delta} (limit 0.1%)")]
    TooManyUnresolved { delta: f64, unresolved: usize, samples: usize },
    #[error("delta {delta} is not below half the distance {limit} to the nearest critical point")]
    DeltaTooLarge { delta: f64, limit: f64 },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Critical(#[from] CriticalError),
}

const WILSON_Z: f64 = 1.959963984540054;

/// Wilson score interval at 95% for `successes` out of `trials`.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaRow {
    pub delta: f64,
    pub samples: usize,
    /// Terminal critical point id -> count.
    pub counts: BTreeMap<usize, usize>,
    pub unresolved: usize,
    pub hits: usize,
    pub f: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

impl DeltaRow {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.wilson_hi - self.wilson_lo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub maximum: usize,
    pub m_plus: usize,
    pub m_minus: usize,
    pub seed: u64,
    pub rows: Vec<DeltaRow>,
}

impl ConcentrationReport {
    /// `f` may drop between consecutive deltas by at most twice the larger
    /// Wilson half-width.
    pub fn monotone_within_noise(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].f >= w[0].f - 2.0 * w[0].half_width().max(w[1].half_width()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,N,f,wilson_lo,wilson_hi,unresolved\n");
        for r in &self.rows {
            let _ = writeln!(out, "{:?},{},{:?},{:?},{:?},{}", r.delta, r.samples, r.f, r.wilson_lo, r.wilson_hi, r.unresolved);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Principal terminals of `p`, or the reason it is not simple.
pub fn principal_terminals(landscape: &Landscape, critset: &CriticalSet, p: usize) -> Result<(usize, usize), ExperimentError> {
    let point = critset.get(p);
    if !point.is_maximum() || point.v1.is_none() {
        return Err(ExperimentError::NonSimpleInput { maximum: p, reason: "no eigenvalue gap".into() });
    }
    let (plus, minus) = trace_principal(landscape, p, critset, None)?;
    let terminal = |o: LineOutcome| match o {
        LineOutcome::Minimum(m) => Ok(m),
        LineOutcome::NonSimpleSaddleHit(s) => {
            Err(ExperimentError::NonSimpleInput { maximum: p, reason: format!("principal line ends at critical point {s}") })
        }
        LineOutcome::Unresolved => Err(ExperimentError::NonSimpleInput { maximum: p, reason: "principal line unresolved".into() }),
    };
    Ok((terminal(plus.outcome)?, terminal(minus.outcome)?))
}

fn check_deltas(landscape: &Landscape, critset: &CriticalSet, p: usize, deltas: &[f64]) -> Result<(), ExperimentError> {
    validate_deltas(deltas, 1)?;
    let limit = critset.isolation(&landscape.manifold, p) / 2.0;
    if deltas[0] >= limit {
        return Err(ExperimentError::DeltaTooLarge { delta: deltas[0], limit });
    }
    Ok(())
}

/// Largest share of unresolved trajectories a run tolerates.
pub const MAX_UNRESOLVED: f64 = 1e-3;

/// For every delta, draws `samples` points from the density on `B_delta(p)`
/// and counts where their descents end.
pub fn run_concentration(
    landscape: &Landscape,
    critset: &CriticalSet,
    p: usize,
    deltas: &[f64],
    samples: usize,
    seed: u64,
) -> Result<ConcentrationReport, ExperimentError> {
    let (m_plus, m_minus) = principal_terminals(landscape, critset, p)?;
    check_deltas(landscape, critset, p, deltas)?;
    let stream = SeedStream::new(seed);
    let center = &critset.get(p).location;
    let mut rows = Vec::with_capacity(deltas.len());
    for (k, &delta) in deltas.iter().enumerate() {
        let sampler = BallSampler::new(landscape, center, delta)?;
        let outcomes: Vec<Result<Option<usize>, ExperimentError>> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.substream(&[k as u64, i as u64]);
                let x = sampler.sample(&mut rng)?;
                match classify_point(landscape, &x, critset) {
                    Ok(id) => Ok(Some(id)),
                    Err(FlowError::Unresolved { .. }) => Ok(None),
                    Err(e) => Err(e.into()),
                }
            })
            .collect();
        let mut counts = BTreeMap::new();
        let mut unresolved = 0;
        for o in outcomes {
            match o? {
                Some(id) => *counts.entry(id).or_insert(0) += 1,
                None => unresolved += 1,
            }
        }
        if unresolved as f64 > MAX_UNRESOLVED * samples as f64 {
            return Err(ExperimentError::TooManyUnresolved { delta, unresolved, samples });
        }
        let hits = counts.iter().filter(|(id, _)| **id == m_plus || **id == m_minus).map(|(_, c)| c).sum();
        let resolved = samples - unresolved;
        let (wilson_lo, wilson_hi) = wilson_interval(hits, resolved);
        rows.push(DeltaRow {
            delta,
            samples,
            counts,
            unresolved,
            hits,
            f: if resolved == 0 { 0.0 } else { hits as f64 / resolved as f64 },
            wilson_lo,
            wilson_hi,
        });
    }
    Ok(ConcentrationReport { maximum: p, m_plus, m_minus, seed, rows })
}

/// How the complement `1 - f` is measured in the scaling comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScalingMode {
    /// Share of the ball whose descent does not end at a principal terminal.
    Basin,
    /// Share of the ball whose descent leaves the sphere `|z| = r` of the
    /// eigen-coordinates outside the caps `|z_1| >= r0`.
    CapExit { r: f64, r0: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingComparisonRow {
    pub delta: f64,
    pub samples: usize,
    pub complement: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingTable {
    pub maximum: usize,
    pub mode: ScalingMode,
    pub eigenvalue_ratio: f64,
    pub predicted_exponent: f64,
    /// `None` when some delta saw no complement events.
    pub fitted_exponent: Option<f64>,
    pub deviation: Option<f64>,
    /// Predicted exponent below 0.25: the maximum is nearly tied and
    /// concentration is slow.
    pub slow_convergence: bool,
    pub seed: u64,
    pub rows: Vec<ScalingComparisonRow>,
}

impl ScalingTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,N,complement,wilson_lo,wilson_hi,predicted\n");
        for r in &self.rows {
            let _ = writeln!(out, "{:?},{},{:?},{:?},{:?},{:?}", r.delta, r.samples, r.complement, r.wilson_lo, r.wilson_hi, r.predicted);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

pub const SLOW_EXPONENT: f64 = 0.25;

/// Measures `1 - f(delta)` and sets it against the linear-model law
/// `c delta^(lambda_1/lambda_2 - 1)`.
pub fn run_scaling_comparison(
    landscape: &Landscape,
    critset: &CriticalSet,
    p: usize,
    deltas: &[f64],
    samples: usize,
    seed: u64,
    mode: ScalingMode,
) -> Result<ScalingTable, ExperimentError> {
    let point = critset.get(p);
    if !point.is_maximum() || point.v1.is_none() {
        return Err(ExperimentError::NonSimpleInput { maximum: p, reason: "no eigenvalue gap".into() });
    }
    let eig = &point.eigenvalues;
    let ratio = eig[0] / eig[1];
    let predicted_exponent = ratio - 1.0;
    let measured: Vec<(usize, usize)> = match mode {
        ScalingMode::Basin => run_concentration(landscape, critset, p, deltas, samples, seed)?
            .rows
            .iter()
            .map(|r| (r.samples - r.unresolved - r.hits, r.samples - r.unresolved))
            .collect(),
        ScalingMode::CapExit { r, r0 } => cap_exit_counts(landscape, critset, p, deltas, samples, seed, r, r0)?,
    };
    let complements: Vec<f64> = measured.iter().map(|(miss, n)| *miss as f64 / *n as f64).collect();
    let logs: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();

    let predicted: Vec<f64> = match mode {
        ScalingMode::CapExit { r, r0 } if deltas.len() >= 4 => {
            // the exact linear model at this maximum; the complement of the
            // two caps' basins is twice the half-ball hypograph share
            let sys = DiagonalSystem::new(eig.clone(), r, r0)?;
            let est = scaling_exponent_estimate(&sys, deltas, samples.max(10_000), seed ^ 0x5ca1e)?;
            est.rows.iter().map(|row| row.ratio).collect()
        }
        _ => {
            // constant fitted with the slope held at the predicted exponent
            let pairs: Vec<(f64, f64)> = logs.iter().zip(&complements).filter(|(_, c)| **c > 0.0).map(|(l, c)| (*l, c.ln())).collect();
            let log_c = if pairs.is_empty() {
                f64::NEG_INFINITY
            } else {
                pairs.iter().map(|(l, c)| c - predicted_exponent * l).sum::<f64>() / pairs.len() as f64
            };
            logs.iter().map(|l| (log_c + predicted_exponent * l).exp()).collect()
        }
    };
    let fitted_exponent = (deltas.len() >= 2 && complements.iter().all(|c| *c > 0.0))
        .then(|| fit_line(&logs, &complements.iter().map(|c| c.ln()).collect::<Vec<_>>()).0);
    let rows = deltas
        .iter()
        .zip(&measured)
        .zip(&complements)
        .zip(&predicted)
        .map(|(((delta, (miss, n)), complement), pred)| {
            let (wilson_lo, wilson_hi) = wilson_interval(*miss, *n);
            ScalingComparisonRow { delta: *delta, samples: *n, complement: *complement, wilson_lo, wilson_hi, predicted: *pred }
        })
        .collect();
    Ok(ScalingTable {
        maximum: p,
        mode,
        eigenvalue_ratio: ratio,
        predicted_exponent,
        fitted_exponent,
        deviation: fitted_exponent.map(|e| e - predicted_exponent),
        slow_convergence: predicted_exponent < SLOW_EXPONENT,
        seed,
        rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn cap_exit_counts(
    landscape: &Landscape,
    critset: &CriticalSet,
    p: usize,
    deltas: &[f64],
    samples: usize,
    seed: u64,
    r: f64,
    r0: f64,
) -> Result<Vec<(usize, usize)>, ExperimentError> {
    validate_deltas(deltas, 1)?;
    if !(r0 > 0.0 && r0 < r && deltas[0] < r) {
        return Err(LinearError::InvalidSystem("need 0 < r0 < r and delta < r".into()).into());
    }
    let point = critset.get(p);
    let lin = &point.linearization;
    let manifold = &landscape.manifold;
    let center = &point.location;
    let coords = |x: &[f64]| lin.to_eigen_coords(&manifold.displacement(center, x));
    let stream = SeedStream::new(seed);
    let mut out = Vec::with_capacity(deltas.len());
    for (k, &delta) in deltas.iter().enumerate() {
        let sampler = BallSampler::new(landscape, center, delta)?;
        let misses: Result<usize, ExperimentError> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.substream(&[k as u64, i as u64]);
                let x = sampler.sample(&mut rng)?;
                let exit = descend_until(landscape, &x, critset, &|y| norm(&coords(y)) - r)?;
                Ok(match exit {
                    Some(y) => usize::from(coords(&y)[0].abs() < r0),
                    None => 1,
                })
            })
            .try_reduce(|| 0, |a, b| Ok(a + b));
        out.push((misses?, samples));
    }
    Ok(out)
}
