//! Catalog of named landscapes.

use std::f64::consts::TAU;

use thiserror::Error;

use super::ScalarField;
use crate::geometry::Manifold;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown builtin landscape `{0}`")]
pub struct UnknownBuiltin(pub String);

/// A catalog entry: the field, the manifold it lives on, and a short note.
#[derive(Clone, Debug)]
pub struct BuiltinLandscape {
    pub name: &'static str,
    pub field: ScalarField,
    pub manifold: Manifold,
    pub description: &'static str,
}

impl BuiltinLandscape {
    pub fn dim(&self) -> usize {
        self.field.dim()
    }
}

struct Entry {
    name: &'static str,
    source: &'static str,
    manifold: fn() -> Manifold,
    description: &'static str,
}

fn torus2() -> Manifold {
    Manifold::torus(vec![TAU, TAU]).expect("valid periods")
}

fn torus3() -> Manifold {
    Manifold::torus(vec![TAU, TAU, TAU]).expect("valid periods")
}

fn circle() -> Manifold {
    Manifold::circle(TAU).expect("valid period")
}

const CATALOG: &[Entry] = &[
    Entry {
        name: "torus2_sep",
        source: "cos(x1) + 0.5*cos(x2)",
        manifold: torus2,
        description: "separable torus landscape; critical points at {0, pi}^2, principal lines hit saddles",
    },
    Entry {
        name: "torus2_skew",
        source: "cos(x1) + 0.5*cos(x2) + 0.3*cos(x1 - x2)",
        manifold: torus2,
        description: "coupled torus landscape; one maximum, two saddles, one minimum",
    },
    Entry {
        name: "torus3_skew",
        source: "cos(x1) + 0.6*cos(x2) + 0.3*cos(x3) + 0.2*cos(x1 - x2) + 0.1*cos(x2 - x3)",
        manifold: torus3,
        description: "three-torus landscape with critical points at {0, pi}^3",
    },
    Entry {
        name: "circle_1",
        source: "sin(x1)",
        manifold: circle,
        description: "single harmonic on the circle: one maximum, one minimum",
    },
    Entry {
        name: "circle_2",
        source: "sin(2*x1) + 0.2*cos(x1)",
        manifold: circle,
        description: "two maxima and two minima on the circle",
    },
    Entry {
        name: "circle_3",
        source: "sin(3*x1) + 0.2*cos(x1)",
        manifold: circle,
        description: "three maxima and three minima on the circle",
    },
    Entry {
        name: "box_quad",
        source: "-(2*x1^2 + x2^2)",
        manifold: || Manifold::cube(2, -1.0, 1.0).expect("valid bounds"),
        description: "-x^T Q x with Q = diag(2, 1) on [-1, 1]^2; the linear model around its maximum",
    },
    Entry {
        name: "box_quartic",
        source: "-(2*x1^2 + x2^2) + x1^4 + x2^4 + 6*x1^2*x2^2",
        manifold: || Manifold::cube(2, -2.0, 2.0).expect("valid bounds"),
        description: "maximum at the origin with minima on both axes; descent is inward on [-2, 2]^2",
    },
    Entry {
        name: "line_3min",
        source: "x1^6/6 - 1.25*x1^4 + 2*x1^2",
        manifold: || Manifold::cube(1, -3.0, 3.0).expect("valid bounds"),
        description: "interval landscape with minima at -2, 0, 2 and maxima at -1, 1",
    },
];

pub const BUILTIN_NAMES: &[&str] = &[
    "torus2_sep",
    "torus2_skew",
    "torus3_skew",
    "circle_1",
    "circle_2",
    "circle_3",
    "box_quad",
    "box_quartic",
    "line_3min",
];

/// Looks up a catalog landscape by name.
pub fn builtin(name: &str) -> Result<BuiltinLandscape, UnknownBuiltin> {
    let entry = CATALOG
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| UnknownBuiltin(name.to_string()))?;
    let manifold = (entry.manifold)();
    let field = ScalarField::parse(entry.source, manifold.dim()).expect("catalog sources are valid");
    Ok(BuiltinLandscape { name: entry.name, field, manifold, description: entry.description })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_match_catalog() {
        let names: Vec<_> = CATALOG.iter().map(|e| e.name).collect();
        assert_eq!(names, BUILTIN_NAMES);
        for name in BUILTIN_NAMES {
            builtin(name).unwrap();
        }
    }

    #[test]
    fn unknown_name() {
        assert_eq!(builtin("unknown").unwrap_err(), UnknownBuiltin("unknown".into()));
    }

    #[test]
    fn separable_torus_gradient_vanishes_on_the_analytic_grid() {
        let b = builtin("torus2_sep").unwrap();
        for a in [0.0, std::f64::consts::PI] {
            for c in [0.0, std::f64::consts::PI] {
                let (_, g) = b.field.gradient(&[a, c]).unwrap();
                assert!(g.iter().all(|v| v.abs() < 1e-15), "{g:?}");
            }
        }
    }

    #[test]
    fn circle_1_is_sine() {
        let b = builtin("circle_1").unwrap();
        assert_eq!(b.dim(), 1);
        assert_eq!(b.field.value(&[0.3]).unwrap(), 0.3f64.sin());
    }
}
