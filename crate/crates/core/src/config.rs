//! JSON landscape configuration.
//!
//! ```json
//! {
//!   "manifold": { "kind": "torus", "periods": ["2pi", "2pi"] },
//!   "dimension": 2,
//!   "F": "cos(x1) + 0.5*cos(x2)",
//!   "metric": "identity",
//!   "density": "riemannian",
//!   "tolerances": { "grad_tol": 1e-9 },
//!   "experiment": { "deltas": [0.2, 0.1, 0.05, 0.025], "samples": 2000 }
//! }
//! ```
//!
//! `F` may also name a catalog entry as `builtin:<name>`, in which case the
//! manifold and dimension default to the entry's.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::experiments::ScalingMode;
use crate::field::{builtin, FieldError, ScalarField, UnknownBuiltin};
use crate::geometry::{Density, GeometryError, Landscape, Manifold, MetricField, ToleranceSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("in {what}: {source}")]
    Field { what: String, source: FieldError },
    #[error(transparent)]
    Builtin(#[from] UnknownBuiltin),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A length given as a number or as `pi`, `2pi` or `tau`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Length {
    Number(f64),
    Named(String),
}

impl Length {
    pub fn value(&self) -> Result<f64, ConfigError> {
        match self {
            Length::Number(v) => Ok(*v),
            Length::Named(s) => match s.trim() {
                "pi" => Ok(PI),
                "2pi" | "2*pi" | "tau" => Ok(TAU),
                other => other.parse().map_err(|_| ConfigError::Invalid(format!("unknown length `{other}`"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ManifoldSpec {
    Torus { periods: Vec<Length> },
    Circle { period: Length },
    Box { bounds: Vec<[Length; 2]> },
}

impl ManifoldSpec {
    pub fn build(&self) -> Result<Manifold, ConfigError> {
        Ok(match self {
            ManifoldSpec::Torus { periods } => Manifold::torus(periods.iter().map(Length::value).collect::<Result<_, _>>()?)?,
            ManifoldSpec::Circle { period } => Manifold::circle(period.value()?)?,
            ManifoldSpec::Box { bounds } => {
                let mut lower = Vec::with_capacity(bounds.len());
                let mut upper = Vec::with_capacity(bounds.len());
                for [lo, hi] in bounds {
                    lower.push(lo.value()?);
                    upper.push(hi.value()?);
                }
                Manifold::new_box(lower, upper)?
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Number(f64),
    Expr(String),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MetricSpec {
    Named(String),
    Matrix(Vec<Vec<Entry>>),
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec::Named("identity".into())
    }
}

fn default_density() -> String {
    "riemannian".into()
}

/// Optional parameters for the stochastic subcommands.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub maximum: Option<usize>,
    pub deltas: Option<Vec<f64>>,
    pub samples: Option<usize>,
    pub grid: Option<usize>,
    pub scaling: Option<ScalingMode>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    #[serde(default)]
    pub manifold: Option<ManifoldSpec>,
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(rename = "F")]
    pub field: String,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default = "default_density")]
    pub density: String,
    #[serde(default)]
    pub tolerances: ToleranceSet,
    #[serde(default)]
    pub experiment: ExperimentSpec,
}

fn parse_field(src: &str, dim: usize, what: &str) -> Result<ScalarField, ConfigError> {
    ScalarField::parse(src, dim).map_err(|source| ConfigError::Field { what: what.to_string(), source })
}

impl LandscapeConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn build(&self) -> Result<Landscape, ConfigError> {
        let (manifold, field) = match self.field.trim().strip_prefix("builtin:") {
            Some(name) => {
                let b = builtin(name.trim())?;
                let manifold = match &self.manifold {
                    Some(spec) => spec.build()?,
                    None => b.manifold,
                };
                (manifold, b.field)
            }
            None => {
                let spec = self.manifold.as_ref().ok_or_else(|| ConfigError::Invalid("`manifold` is required unless F is a builtin".into()))?;
                let manifold = spec.build()?;
                let field = parse_field(&self.field, manifold.dim(), "F")?;
                (manifold, field)
            }
        };
        let n = manifold.dim();
        if let Some(d) = self.dimension {
            if d != n {
                return Err(ConfigError::Invalid(format!("dimension {d} does not match the manifold's {n}")));
            }
        }
        if field.dim() != n {
            return Err(ConfigError::Invalid(format!("F has dimension {} but the manifold has {n}", field.dim())));
        }
        let metric = match &self.metric {
            MetricSpec::Named(s) if s.trim() == "identity" => MetricField::Identity,
            MetricSpec::Named(s) => return Err(ConfigError::Invalid(format!("unknown metric `{s}`"))),
            MetricSpec::Matrix(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(ConfigError::Invalid(format!("metric must be {n}x{n}")));
                }
                let mut entries = Vec::with_capacity(n * n);
                for (i, row) in rows.iter().enumerate() {
                    for (j, e) in row.iter().enumerate() {
                        entries.push(match e {
                            Entry::Number(v) => ScalarField::constant(*v, n),
                            Entry::Expr(s) => parse_field(s, n, &format!("metric[{i}][{j}]"))?,
                        });
                    }
                }
                MetricField::from_entries(n, entries)?
            }
        };
        let density = match self.density.trim() {
            "riemannian" => Density::Riemannian,
            src => Density::Field(parse_field(src, n, "density")?),
        };
        Ok(Landscape::new(manifold, field, metric, density, self.tolerances)?)
    }
}

/// Geometric delta list with ratio 1/2, starting below half the isolation
/// radius of the maximum.
pub fn default_deltas(isolation: f64, count: usize) -> Vec<f64> {
    let start = (0.45 * isolation).min(0.2);
    (0..count).map(|k| start * 0.5f64.powi(k as i32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_with_defaults() {
        let c = LandscapeConfig::from_json(r#"{"F": "builtin:torus2_skew"}"#).unwrap();
        let l = c.build().unwrap();
        assert_eq!(l.dim(), 2);
        assert_eq!(l.manifold.period(0), Some(TAU));
        assert!(l.metric.is_identity());
        assert_eq!(l.tolerances, ToleranceSet::default());
    }

    #[test]
    fn full_config() {
        let text = r#"{
            "manifold": {"kind": "box", "bounds": [[-2, 2], [-2, 2]]},
            "dimension": 2,
            "F": "-(x1^2 + 2*x2^2)",
            "metric": [["1 + 0.1*x1^2", 0], [0, 2]],
            "density": "1 + 0.5*x2^2",
            "tolerances": {"grad_tol": 1e-8},
            "experiment": {"samples": 500, "scaling": {"mode": "cap_exit", "r": 0.9, "r0": 0.6}}
        }"#;
        let c = LandscapeConfig::from_json(text).unwrap();
        let l = c.build().unwrap();
        assert!(!l.metric.is_identity());
        assert!(matches!(l.density, Density::Field(_)));
        assert_eq!(l.tolerances.grad_tol, 1e-8);
        assert_eq!(l.tolerances.t_max, 1e4);
        let g = l.metric.matrix_at(&[1.0, 0.0]).unwrap();
        assert!((g[(0, 0)] - 1.1).abs() < 1e-15 && g[(1, 1)] == 2.0);
        assert_eq!(c.experiment.scaling, Some(ScalingMode::CapExit { r: 0.9, r0: 0.6 }));
    }

    #[test]
    fn named_periods() {
        let text = r#"{"manifold": {"kind": "torus", "periods": ["2pi", "pi"]}, "F": "cos(x1) + cos(2*x2)"}"#;
        let l = LandscapeConfig::from_json(text).unwrap().build().unwrap();
        assert_eq!(l.manifold.period(1), Some(PI));
    }

    #[test]
    fn rejections() {
        let bad = [
            r#"{"F": "x1"}"#,
            r#"{"F": "builtin:nope"}"#,
            r#"{"F": "builtin:circle_1", "dimension": 2}"#,
            r#"{"manifold": {"kind": "circle", "period": 1}, "F": "x2"}"#,
            r#"{"manifold": {"kind": "circle", "period": 1}, "F": "x1", "metric": "flat"}"#,
            r#"{"manifold": {"kind": "circle", "period": 1}, "F": "x1", "metric": [[1, 0]]}"#,
            r#"{"manifold": {"kind": "torus", "periods": [-1]}, "F": "x1"}"#,
            r#"{"manifold": {"kind": "torus", "periods": ["e"]}, "F": "x1"}"#,
            r#"{"manifold": {"kind": "circle", "period": 1}, "F": "x1", "tolerances": {"grad_tol": -1}}"#,
            r#"{"manifold": {"kind": "circle", "period": 1}, "F": "x1", "extra": 1}"#,
            r#"{"F": "#,
        ];
        for text in bad {
            let r = LandscapeConfig::from_json(text).and_then(|c| c.build().map(|_| ()));
            assert!(r.is_err(), "{text}");
        }
    }

    #[test]
    fn deltas_halve() {
        let d = default_deltas(1.0, 4);
        assert_eq!(d, vec![0.2, 0.1, 0.05, 0.025]);
        assert!(default_deltas(0.2, 3)[0] < 0.1);
    }
}
