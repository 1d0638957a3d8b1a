//! Scalar fields: expression parsing, exact second-order forward-mode
//! differentiation, and the builtin landscape catalog.

mod builtin;
mod parse;
mod tape;

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builtin::{builtin, BuiltinLandscape, UnknownBuiltin, BUILTIN_NAMES};
pub use parse::{parse_expr, ParseError};
use tape::Tape;

/// Elementary functions understood by the grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
}

impl Func {
    pub const ALL: [Func; 5] = [Func::Sin, Func::Cos, Func::Exp, Func::Log, Func::Tanh];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Abstract syntax tree of a scalar expression.
///
/// Variables are stored zero-based; `Var(0)` prints as `x1`.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// Power with a constant real exponent.
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

impl Expr {
    /// Largest zero-based variable index used, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.max_var(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                match (a.max_var(), b.max_var()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                }
            }
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => 1 + a.node_count(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                1 + a.node_count() + b.node_count()
            }
        }
    }
}

fn fmt_number(v: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    // `{:?}` is the shortest representation that parses back to the same bits.
    write!(f, "{v:?}")
}

/// Fully parenthesized printer; its output parses back to the same AST.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => fmt_number(*v, f),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, p) => {
                write!(f, "({a}^")?;
                fmt_number(*p, f)?;
                write!(f, ")")
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive value {0}")]
    LogNonPositive(f64),
    #[error("power {base}^{exponent} is outside the real domain")]
    PowDomain { base: f64, exponent: f64 },
    #[error("evaluation produced a non-finite value")]
    NonFinite,
    #[error("point has dimension {found}, field expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("variable x{index} out of range for dimension {dim}")]
    VariableOutOfRange { index: usize, dim: usize },
}

/// Value, differential and coordinate Hessian at a point.
///
/// The Hessian is stored as its packed upper triangle, so it is symmetric by
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub gradient: Vec<f64>,
    hessian_upper: Vec<f64>,
}

impl Jet2 {
    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn hessian(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.hessian_upper[packed_index(self.dim(), i, j)]
    }

    pub fn hessian_packed(&self) -> &[f64] {
        &self.hessian_upper
    }

    pub fn hessian_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.hessian(i, j))
    }
}

/// Row-major index of `(i, j)`, `i <= j`, in a packed upper triangle.
pub(crate) fn packed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * n - (i * i - i) / 2 + (j - i)
}

/// A parsed expression bound to a dimension, compiled for evaluation.
#[derive(Clone, Debug)]
pub struct ScalarField {
    expr: Expr,
    dim: usize,
    source: String,
    tape: Tape,
}

impl ScalarField {
    pub fn parse(source: &str, dim: usize) -> Result<Self, FieldError> {
        if dim == 0 {
            return Err(FieldError::ZeroDimension);
        }
        let expr = parse_expr(source, dim)?;
        let mut field = Self::from_expr(expr, dim)?;
        field.source = source.to_string();
        Ok(field)
    }

    pub fn from_expr(expr: Expr, dim: usize) -> Result<Self, FieldError> {
        if dim == 0 {
            return Err(FieldError::ZeroDimension);
        }
        if let Some(i) = expr.max_var() {
            if i >= dim {
                return Err(FieldError::VariableOutOfRange { index: i + 1, dim });
            }
        }
        let tape = Tape::compile(&expr, dim);
        let source = expr.to_string();
        Ok(Self { expr, dim, source, tape })
    }

    pub fn constant(value: f64, dim: usize) -> Self {
        Self::from_expr(Expr::Const(value), dim).expect("constant field is always valid")
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The text the field was parsed from (or its printed form).
    pub fn source(&self) -> &str {
        &self.source
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), EvalError> {
        if x.len() != self.dim {
            return Err(EvalError::DimensionMismatch { expected: self.dim, found: x.len() });
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.check_dim(x)?;
        self.tape.eval_value(x)
    }

    /// Writes dF(x) into `grad` and returns F(x).
    pub fn gradient_into(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, EvalError> {
        self.check_dim(x)?;
        assert_eq!(grad.len(), self.dim, "gradient buffer has wrong length");
        self.tape.eval_gradient(x, grad)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        let mut g = vec![0.0; self.dim];
        let v = self.gradient_into(x, &mut g)?;
        Ok((v, g))
    }

    pub fn jet2(&self, x: &[f64]) -> Result<Jet2, EvalError> {
        self.check_dim(x)?;
        let (value, gradient, hessian_upper) = self.tape.eval_jet2(x)?;
        Ok(Jet2 { value, gradient, hessian_upper })
    }
}

impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.expr == other.expr
    }
}

/// Exact value, gradient and Hessian of `f` at `x`.
pub fn eval_jet2(f: &ScalarField, x: &[f64]) -> Result<Jet2, EvalError> {
    f.jet2(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_gradient(f: &ScalarField, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f.value(&xp).unwrap() - f.value(&xm).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn packed_index_is_row_major_upper_triangle() {
        let n = 4;
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                assert_eq!(packed_index(n, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn cos_at_zero() {
        let f = ScalarField::parse("cos(x1)", 1).unwrap();
        let j = f.jet2(&[0.0]).unwrap();
        assert_eq!(j.value, 1.0);
        assert_eq!(j.gradient, vec![0.0]);
        assert_eq!(j.hessian(0, 0), -1.0);
    }

    #[test]
    fn bilinear_product() {
        let f = ScalarField::parse("x1*x2", 2).unwrap();
        let j = f.jet2(&[2.0, 3.0]).unwrap();
        assert_eq!(j.value, 6.0);
        assert_eq!(j.gradient, vec![3.0, 2.0]);
        assert_eq!(j.hessian_matrix(), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn skew_torus_gradient_matches_central_differences() {
        let f = ScalarField::parse("cos(x1)+0.5*cos(x2)+0.3*cos(x1-x2)", 2).unwrap();
        let x = [0.7, 1.1];
        let (_, g) = f.gradient(&x).unwrap();
        let fd = central_gradient(&f, &x, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3), "{a} vs {b}");
        }
        // hand-derived values
        assert!((g[0] - (-(0.7f64).sin() - 0.3 * (-0.4f64).sin())).abs() < 1e-15);
        assert!((g[1] - (-0.5 * (1.1f64).sin() + 0.3 * (-0.4f64).sin())).abs() < 1e-15);
    }

    #[test]
    fn every_rule_matches_finite_differences() {
        let src = "exp(0.3*x1)*sin(x2) - log(2 + x1^2) / (1.5 + tanh(x2*x3)) + (x3+3)^0.5 - x1^-2";
        let f = ScalarField::parse(src, 3).unwrap();
        let x = [0.8, -0.4, 1.3];
        let j = f.jet2(&x).unwrap();
        let fd = central_gradient(&f, &x, 1e-5);
        for i in 0..3 {
            assert!((j.gradient[i] - fd[i]).abs() <= 1e-6 * (1.0 + fd[i].abs()));
        }
        let h = 1e-5;
        for i in 0..3 {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let gp = f.gradient(&xp).unwrap().1;
            let gm = f.gradient(&xm).unwrap().1;
            for k in 0..3 {
                let fd2 = (gp[k] - gm[k]) / (2.0 * h);
                assert!((j.hessian(i, k) - fd2).abs() <= 1e-5 * (1.0 + fd2.abs()));
            }
        }
    }

    #[test]
    fn runtime_domain_errors_are_reported() {
        let f = ScalarField::parse("log(x1)", 1).unwrap();
        assert_eq!(f.value(&[0.0]), Err(EvalError::LogNonPositive(0.0)));
        let f = ScalarField::parse("1/x1", 1).unwrap();
        assert_eq!(f.jet2(&[0.0]), Err(EvalError::DivisionByZero));
        let f = ScalarField::parse("x1^0.5", 1).unwrap();
        assert!(matches!(f.gradient(&[-1.0]), Err(EvalError::PowDomain { .. })));
        let f = ScalarField::parse("exp(x1)", 1).unwrap();
        assert_eq!(f.value(&[1000.0]), Err(EvalError::NonFinite));
    }

    #[test]
    fn integer_powers_are_defined_at_zero() {
        let f = ScalarField::parse("x1^2 + x1^1 + x1^0", 1).unwrap();
        let j = f.jet2(&[0.0]).unwrap();
        assert_eq!(j.value, 1.0);
        assert_eq!(j.gradient, vec![1.0]);
        assert_eq!(j.hessian(0, 0), 2.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let f = ScalarField::parse("x1", 2).unwrap();
        assert!(matches!(f.value(&[1.0]), Err(EvalError::DimensionMismatch { .. })));
    }
}
