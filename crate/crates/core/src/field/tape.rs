//! Linearized expression evaluation with forward-mode derivatives.
//!
//! Every node becomes a slot; a slot carries the value, the n first
//! derivatives and (for second order) the packed upper triangle of the n x n
//! second derivatives. Operands always live in lower slots than their result.

use std::cell::RefCell;

use super::{EvalError, Expr, Func};

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(f64),
    Var(usize),
    Neg(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, f64),
    Call(Func, usize),
}

#[derive(Clone, Debug)]
pub(crate) struct Tape {
    ops: Vec<Op>,
    dim: usize,
    /// (i, j) pairs of the packed upper triangle, in storage order.
    pairs: Vec<(usize, usize)>,
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| match cell.try_borrow_mut() {
        Ok(mut buf) => {
            if buf.len() < len {
                buf.resize(len, 0.0);
            }
            f(&mut buf[..len])
        }
        // re-entrant use (never expected) falls back to a fresh buffer
        Err(_) => f(&mut vec![0.0; len]),
    })
}

/// Value and first two derivatives of a scalar function at a point.
fn unary_taylor(op: Op, u: f64) -> Result<(f64, f64, f64), EvalError> {
    let out = match op {
        Op::Neg(_) => (-u, -1.0, 0.0),
        Op::Pow(_, p) => pow_taylor(u, p)?,
        Op::Call(func, _) => match func {
            Func::Sin => {
                let (s, c) = u.sin_cos();
                (s, c, -s)
            }
            Func::Cos => {
                let (s, c) = u.sin_cos();
                (c, -s, -c)
            }
            Func::Exp => {
                let e = u.exp();
                (e, e, e)
            }
            Func::Log => {
                if u <= 0.0 || u.is_nan() {
                    return Err(EvalError::LogNonPositive(u));
                }
                (u.ln(), 1.0 / u, -1.0 / (u * u))
            }
            Func::Tanh => {
                let t = u.tanh();
                let s = 1.0 - t * t;
                (t, s, -2.0 * t * s)
            }
        },
        _ => unreachable!("not a unary op"),
    };
    Ok(out)
}

fn pow_taylor(u: f64, p: f64) -> Result<(f64, f64, f64), EvalError> {
    let domain = || EvalError::PowDomain { base: u, exponent: p };
    if p == 0.0 {
        return Ok((1.0, 0.0, 0.0));
    }
    if p.fract() == 0.0 && p.abs() <= i32::MAX as f64 {
        let k = p as i32;
        if k < 0 && u == 0.0 {
            return Err(domain());
        }
        let d1 = f64::from(k) * u.powi(k - 1);
        let d2 = if k == 1 { 0.0 } else { f64::from(k) * f64::from(k - 1) * u.powi(k - 2) };
        return Ok((u.powi(k), d1, d2));
    }
    if u <= 0.0 {
        return Err(domain());
    }
    Ok((u.powf(p), p * u.powf(p - 1.0), p * (p - 1.0) * u.powf(p - 2.0)))
}

impl Tape {
    pub(crate) fn compile(expr: &Expr, dim: usize) -> Self {
        let mut ops = Vec::with_capacity(expr.node_count());
        Self::emit(expr, &mut ops);
        let pairs = (0..dim).flat_map(|i| (i..dim).map(move |j| (i, j))).collect();
        Tape { ops, dim, pairs }
    }

    fn emit(expr: &Expr, ops: &mut Vec<Op>) -> usize {
        let op = match expr {
            Expr::Const(v) => Op::Const(*v),
            Expr::Var(i) => Op::Var(*i),
            Expr::Neg(a) => Op::Neg(Self::emit(a, ops)),
            Expr::Pow(a, p) => Op::Pow(Self::emit(a, ops), *p),
            Expr::Call(f, a) => Op::Call(*f, Self::emit(a, ops)),
            Expr::Add(a, b) => {
                let (a, b) = (Self::emit(a, ops), Self::emit(b, ops));
                Op::Add(a, b)
            }
            Expr::Sub(a, b) => {
                let (a, b) = (Self::emit(a, ops), Self::emit(b, ops));
                Op::Sub(a, b)
            }
            Expr::Mul(a, b) => {
                let (a, b) = (Self::emit(a, ops), Self::emit(b, ops));
                Op::Mul(a, b)
            }
            Expr::Div(a, b) => {
                let (a, b) = (Self::emit(a, ops), Self::emit(b, ops));
                Op::Div(a, b)
            }
        };
        ops.push(op);
        ops.len() - 1
    }

    pub(crate) fn eval_value(&self, x: &[f64]) -> Result<f64, EvalError> {
        with_scratch(self.ops.len(), |v| {
            for (k, op) in self.ops.iter().enumerate() {
                v[k] = match *op {
                    Op::Const(c) => c,
                    Op::Var(i) => x[i],
                    Op::Add(a, b) => v[a] + v[b],
                    Op::Sub(a, b) => v[a] - v[b],
                    Op::Mul(a, b) => v[a] * v[b],
                    Op::Div(a, b) => {
                        if v[b] == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        v[a] / v[b]
                    }
                    Op::Neg(a) | Op::Pow(a, _) | Op::Call(_, a) => unary_taylor(*op, v[a])?.0,
                };
            }
            finite(v[self.ops.len() - 1])
        })
    }

    /// First-order pass; slot layout is `[value, d/dx_1 .. d/dx_n]`.
    pub(crate) fn eval_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, EvalError> {
        let n = self.dim;
        let s = 1 + n;
        with_scratch(self.ops.len() * s, |buf| {
            for (k, op) in self.ops.iter().enumerate() {
                let (lo, hi) = buf.split_at_mut(k * s);
                let out = &mut hi[..s];
                let slot = |i: usize| &lo[i * s..(i + 1) * s];
                match *op {
                    Op::Const(c) => {
                        out.fill(0.0);
                        out[0] = c;
                    }
                    Op::Var(i) => {
                        out.fill(0.0);
                        out[0] = x[i];
                        out[1 + i] = 1.0;
                    }
                    Op::Add(a, b) | Op::Sub(a, b) => {
                        let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
                        let (a, b) = (slot(a), slot(b));
                        for q in 0..s {
                            out[q] = a[q] + sign * b[q];
                        }
                    }
                    Op::Mul(a, b) => {
                        let (a, b) = (slot(a), slot(b));
                        out[0] = a[0] * b[0];
                        for q in 1..s {
                            out[q] = a[0] * b[q] + b[0] * a[q];
                        }
                    }
                    Op::Div(a, b) => {
                        let (a, b) = (slot(a), slot(b));
                        if b[0] == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        let w = a[0] / b[0];
                        out[0] = w;
                        for q in 1..s {
                            out[q] = (a[q] - w * b[q]) / b[0];
                        }
                    }
                    Op::Neg(a) | Op::Pow(a, _) | Op::Call(_, a) => {
                        let a = slot(a);
                        let (f0, f1, _) = unary_taylor(*op, a[0])?;
                        out[0] = f0;
                        for q in 1..s {
                            out[q] = f1 * a[q];
                        }
                    }
                }
            }
            let last = &buf[(self.ops.len() - 1) * s..self.ops.len() * s];
            for (g, v) in grad.iter_mut().zip(&last[1..]) {
                *g = finite(*v)?;
            }
            finite(last[0])
        })
    }

    /// Second-order pass; slot layout is `[value, gradient(n), packed hessian]`.
    pub(crate) fn eval_jet2(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), EvalError> {
        let n = self.dim;
        let m = self.pairs.len();
        let s = 1 + n + m;
        let pairs = &self.pairs;
        with_scratch(self.ops.len() * s, |buf| {
            for (k, op) in self.ops.iter().enumerate() {
                let (lo, hi) = buf.split_at_mut(k * s);
                let out = &mut hi[..s];
                let slot = |i: usize| &lo[i * s..(i + 1) * s];
                match *op {
                    Op::Const(c) => {
                        out.fill(0.0);
                        out[0] = c;
                    }
                    Op::Var(i) => {
                        out.fill(0.0);
                        out[0] = x[i];
                        out[1 + i] = 1.0;
                    }
                    Op::Add(a, b) | Op::Sub(a, b) => {
                        let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
                        let (a, b) = (slot(a), slot(b));
                        for q in 0..s {
                            out[q] = a[q] + sign * b[q];
                        }
                    }
                    Op::Mul(a, b) => {
                        let (a, b) = (slot(a), slot(b));
                        product(a, b, out, n, pairs);
                    }
                    Op::Div(a, b) => {
                        let (a, b) = (slot(a), slot(b));
                        let v = b[0];
                        if v == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        // 1/v as a unary jet, then the product rule
                        let mut recip = vec![0.0; s];
                        chain(b, (1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v)), &mut recip, n, pairs);
                        product(a, &recip, out, n, pairs);
                    }
                    Op::Neg(a) | Op::Pow(a, _) | Op::Call(_, a) => {
                        let a = slot(a);
                        let t = unary_taylor(*op, a[0])?;
                        chain(a, t, out, n, pairs);
                    }
                }
            }
            let last = &buf[(self.ops.len() - 1) * s..self.ops.len() * s];
            if last.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::NonFinite);
            }
            Ok((last[0], last[1..1 + n].to_vec(), last[1 + n..].to_vec()))
        })
    }
}

fn finite(v: f64) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite)
    }
}

fn product(a: &[f64], b: &[f64], out: &mut [f64], n: usize, pairs: &[(usize, usize)]) {
    out[0] = a[0] * b[0];
    for q in 1..=n {
        out[q] = a[0] * b[q] + b[0] * a[q];
    }
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let h = 1 + n + k;
        out[h] = a[0] * b[h] + b[0] * a[h] + a[1 + i] * b[1 + j] + b[1 + i] * a[1 + j];
    }
}

fn chain(a: &[f64], (f0, f1, f2): (f64, f64, f64), out: &mut [f64], n: usize, pairs: &[(usize, usize)]) {
    out[0] = f0;
    for q in 1..=n {
        out[q] = f1 * a[q];
    }
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let h = 1 + n + k;
        out[h] = f1 * a[h] + f2 * a[1 + i] * a[1 + j];
    }
}
