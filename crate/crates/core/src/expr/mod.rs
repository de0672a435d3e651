//! Differentiable arithmetic expressions over time, state, and control symbols.
//!
//! Dynamics `f`, running cost `f0`, salvage `l`, and explicit control laws are
//! all stated in this small DSL. An [`Expr`] is immutable after parsing;
//! evaluation is pure and safe to call from multiple threads.
//!
//! Grammar (precedence low to high): `+ -` < `* /` < unary `-` < `^`
//! (right-associative), function calls `sin cos exp log abs sqrt`, the
//! time-window indicator `ind(a,b)` (1 when `a <= t < b`, else 0; `b` may be
//! `inf`), variables `t`, `x1..x9`, `u1..u9`, decimal/scientific constants.
//!
//! Two semantic details worth knowing:
//!
//! * Products with one factor exactly zero evaluate to zero even if the other
//!   factor is undefined there. This is what makes window-masked integrands
//!   such as `(x1/t)*ind(2,inf)` total on `t >= 0`.
//! * Evaluation takes a separate *window time* used only to resolve `ind`
//!   nodes. Integrators exploit this to hold the active window fixed across
//!   one Runge-Kutta step while smooth time dependence uses the stage time.

mod parse;

pub use parse::{parse_expr, ParseError};

use std::fmt;
use thiserror::Error;

/// A symbol the DSL can reference. Indices are zero-based internally;
/// the surface syntax is one-based (`x1` is `State(0)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    Time,
    State(usize),
    Control(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Time => write!(f, "t"),
            Var::State(i) => write!(f, "x{}", i + 1),
            Var::Control(i) => write!(f, "u{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sqrt,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Abs => "abs",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Expression AST. `Ind` bounds are literals fixed at parse time, so the
/// whole tree is piecewise smooth in `t` with known breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// `ind(lo, hi)`: 1 on the half-open window `[lo, hi)`, else 0.
    /// `hi` may be `f64::INFINITY`.
    Ind { lo: f64, hi: f64 },
}

/// Runtime evaluation failure, pointing at the offending subexpression.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{kind} in `{node}`")]
pub struct EvalError {
    pub kind: EvalErrorKind,
    /// Pretty-printed subexpression where the error occurred.
    pub node: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalErrorKind {
    #[error("division by zero")]
    DivisionByZero,
    #[error("logarithm of a non-positive value")]
    LogDomain,
    #[error("square root of a negative value")]
    SqrtDomain,
    #[error("power with undefined result")]
    PowDomain,
}

/// Failure of [`diff_expr`].
#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiffError {
    #[error("differentiation with respect to t is not supported")]
    WithRespectToTime,
}

impl Expr {
    /// Evaluate at `(t, x, u)` in IEEE double precision.
    ///
    /// `ind(a,b)` tests `a <= t < b`. Slices shorter than the referenced
    /// indices panic; dimensions are enforced at parse time.
    pub fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> Result<f64, EvalError> {
        self.eval_in_window(t, t, x, u)
    }

    /// Evaluate with a separate window-resolution time `t_window` used only
    /// by `ind` nodes; all smooth time dependence uses `t`.
    pub fn eval_in_window(
        &self,
        t: f64,
        t_window: f64,
        x: &[f64],
        u: &[f64],
    ) -> Result<f64, EvalError> {
        match self {
            Expr::Num(c) => Ok(*c),
            Expr::Var(Var::Time) => Ok(t),
            Expr::Var(Var::State(i)) => Ok(x[*i]),
            Expr::Var(Var::Control(i)) => Ok(u[*i]),
            Expr::Ind { lo, hi } => Ok(if *lo <= t_window && t_window < *hi {
                1.0
            } else {
                0.0
            }),
            Expr::Unary(op, a) => {
                let v = a.eval_in_window(t, t_window, x, u)?;
                match op {
                    UnaryOp::Neg => Ok(-v),
                    UnaryOp::Sin => Ok(v.sin()),
                    UnaryOp::Cos => Ok(v.cos()),
                    UnaryOp::Exp => Ok(v.exp()),
                    UnaryOp::Abs => Ok(v.abs()),
                    UnaryOp::Log => {
                        if v > 0.0 {
                            Ok(v.ln())
                        } else {
                            Err(self.error(EvalErrorKind::LogDomain))
                        }
                    }
                    UnaryOp::Sqrt => {
                        if v >= 0.0 {
                            Ok(v.sqrt())
                        } else {
                            Err(self.error(EvalErrorKind::SqrtDomain))
                        }
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                if *op == BinaryOp::Mul {
                    // Zero-product masking: a factor that is exactly zero
                    // annihilates the product even when the other factor is
                    // undefined at this point. Window-masked integrands rely
                    // on this.
                    let va = a.eval_in_window(t, t_window, x, u);
                    let vb = b.eval_in_window(t, t_window, x, u);
                    return match (va, vb) {
                        (Ok(p), Ok(q)) => Ok(p * q),
                        (Ok(p), Err(e)) => {
                            if p == 0.0 {
                                Ok(0.0)
                            } else {
                                Err(e)
                            }
                        }
                        (Err(e), Ok(q)) => {
                            if q == 0.0 {
                                Ok(0.0)
                            } else {
                                Err(e)
                            }
                        }
                        (Err(e), Err(_)) => Err(e),
                    };
                }
                let va = a.eval_in_window(t, t_window, x, u)?;
                let vb = b.eval_in_window(t, t_window, x, u)?;
                match op {
                    BinaryOp::Add => Ok(va + vb),
                    BinaryOp::Sub => Ok(va - vb),
                    BinaryOp::Mul => unreachable!(),
                    BinaryOp::Div => {
                        if vb == 0.0 {
                            Err(self.error(EvalErrorKind::DivisionByZero))
                        } else {
                            Ok(va / vb)
                        }
                    }
                    BinaryOp::Pow => {
                        let r = va.powf(vb);
                        if r.is_nan() && !va.is_nan() && !vb.is_nan() {
                            Err(self.error(EvalErrorKind::PowDomain))
                        } else {
                            Ok(r)
                        }
                    }
                }
            }
        }
    }

    fn error(&self, kind: EvalErrorKind) -> EvalError {
        EvalError {
            kind,
            node: self.to_string(),
        }
    }

    /// Largest one-based state index referenced (0 if none). Used for
    /// dimension checks.
    pub fn max_state_index(&self) -> usize {
        let mut m = 0;
        self.visit(&mut |e| {
            if let Expr::Var(Var::State(i)) = e {
                m = m.max(i + 1);
            }
        });
        m
    }

    pub fn max_control_index(&self) -> usize {
        let mut m = 0;
        self.visit(&mut |e| {
            if let Expr::Var(Var::Control(i)) = e {
                m = m.max(i + 1);
            }
        });
        m
    }

    pub fn references_time(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if matches!(e, Expr::Var(Var::Time) | Expr::Ind { .. }) {
                found = true;
            }
        });
        found
    }

    pub fn references_control(&self) -> bool {
        self.max_control_index() > 0
    }

    pub fn references_state(&self) -> bool {
        self.max_state_index() > 0
    }

    /// Append every finite `ind` bound to `out`.
    pub fn collect_breakpoints(&self, out: &mut Vec<f64>) {
        self.visit(&mut |e| {
            if let Expr::Ind { lo, hi } = e {
                out.push(*lo);
                if hi.is_finite() {
                    out.push(*hi);
                }
            }
        });
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Unary(_, a) => a.visit(f),
            Expr::Binary(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            _ => {}
        }
    }
}

/// Exact symbolic partial derivative with respect to a state or control
/// variable. `ind` windows are constant in `x` and `u`, so their derivative
/// is zero; differentiation in `t` is rejected.
pub fn diff_expr(e: &Expr, wrt: Var) -> Result<Expr, DiffError> {
    if wrt == Var::Time {
        return Err(DiffError::WithRespectToTime);
    }
    Ok(diff(e, wrt))
}

fn diff(e: &Expr, wrt: Var) -> Expr {
    match e {
        Expr::Num(_) | Expr::Ind { .. } => Expr::Num(0.0),
        Expr::Var(v) => Expr::Num(if *v == wrt { 1.0 } else { 0.0 }),
        Expr::Unary(op, a) => {
            let da = diff(a, wrt);
            match op {
                UnaryOp::Neg => neg(da),
                UnaryOp::Sin => mul(Expr::Unary(UnaryOp::Cos, a.clone()), da),
                UnaryOp::Cos => neg(mul(Expr::Unary(UnaryOp::Sin, a.clone()), da)),
                UnaryOp::Exp => mul(Expr::Unary(UnaryOp::Exp, a.clone()), da),
                UnaryOp::Log => div(da, (**a).clone()),
                // d|g| = g/|g| * dg; undefined at g = 0, reported at eval time.
                UnaryOp::Abs => mul(
                    div((**a).clone(), Expr::Unary(UnaryOp::Abs, a.clone())),
                    da,
                ),
                UnaryOp::Sqrt => div(
                    da,
                    mul(Expr::Num(2.0), Expr::Unary(UnaryOp::Sqrt, a.clone())),
                ),
            }
        }
        Expr::Binary(op, a, b) => {
            let (a, b) = (&**a, &**b);
            match op {
                BinaryOp::Add => add(diff(a, wrt), diff(b, wrt)),
                BinaryOp::Sub => sub(diff(a, wrt), diff(b, wrt)),
                BinaryOp::Mul => add(
                    mul(diff(a, wrt), b.clone()),
                    mul(a.clone(), diff(b, wrt)),
                ),
                BinaryOp::Div => div(
                    sub(
                        mul(diff(a, wrt), b.clone()),
                        mul(a.clone(), diff(b, wrt)),
                    ),
                    mul(b.clone(), b.clone()),
                ),
                BinaryOp::Pow => match (a, b) {
                    // a^c with constant exponent: c * a^(c-1) * a'
                    (_, Expr::Num(c)) => mul(
                        mul(Expr::Num(*c), pow(a.clone(), Expr::Num(c - 1.0))),
                        diff(a, wrt),
                    ),
                    // c^b: c^b * ln(c) * b'
                    (Expr::Num(c), _) => mul(
                        mul(pow(a.clone(), b.clone()), Expr::Num(c.ln())),
                        diff(b, wrt),
                    ),
                    // general: a^b * (b' ln a + b a'/a)
                    _ => mul(
                        pow(a.clone(), b.clone()),
                        add(
                            mul(diff(b, wrt), Expr::Unary(UnaryOp::Log, Box::new(a.clone()))),
                            div(mul(b.clone(), diff(a, wrt)), a.clone()),
                        ),
                    ),
                },
            }
        }
    }
}

// Smart constructors: constant folding only, no algebraic rewriting.
// Folding keeps derivative trees from drowning in `0*...` terms.

pub(crate) fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if (x + y).is_finite() => Expr::Num(x + y),
        (Expr::Num(z), _) if *z == 0.0 => b,
        (_, Expr::Num(z)) if *z == 0.0 => a,
        _ => Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b)),
    }
}

pub(crate) fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if (x - y).is_finite() => Expr::Num(x - y),
        (_, Expr::Num(z)) if *z == 0.0 => a,
        (Expr::Num(z), _) if *z == 0.0 => neg(b),
        _ => Expr::Binary(BinaryOp::Sub, Box::new(a), Box::new(b)),
    }
}

pub(crate) fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if (x * y).is_finite() => return Expr::Num(x * y),
        (Expr::Num(z), _) | (_, Expr::Num(z)) if *z == 0.0 => return Expr::Num(0.0),
        (Expr::Num(one), _) if *one == 1.0 => return b,
        (_, Expr::Num(one)) if *one == 1.0 => return a,
        _ => {}
    }
    // Gather stacked constant factors: (e * c1) * c2 -> e * (c1*c2), so
    // chain-rule outputs stay readable.
    if let (Expr::Binary(BinaryOp::Mul, x, c1), Expr::Num(c2)) = (&a, &b) {
        if let Expr::Num(c1) = **c1 {
            if (c1 * c2).is_finite() {
                return mul((**x).clone(), Expr::Num(c1 * c2));
            }
        }
    }
    Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b))
}

pub(crate) fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if *y != 0.0 && (x / y).is_finite() => {
            return Expr::Num(x / y)
        }
        (Expr::Num(z), _) if *z == 0.0 => return Expr::Num(0.0),
        (_, Expr::Num(one)) if *one == 1.0 => return a,
        _ => {}
    }
    // (e * c) / d -> e * (c/d)
    if let (Expr::Binary(BinaryOp::Mul, x, c), Expr::Num(d)) = (&a, &b) {
        if let Expr::Num(c) = **c {
            if *d != 0.0 && (c / d).is_finite() {
                return mul((**x).clone(), Expr::Num(c / d));
            }
        }
    }
    Expr::Binary(BinaryOp::Div, Box::new(a), Box::new(b))
}

pub(crate) fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if x.powf(*y).is_finite() => Expr::Num(x.powf(*y)),
        (_, Expr::Num(one)) if *one == 1.0 => a,
        (_, Expr::Num(z)) if *z == 0.0 => Expr::Num(1.0),
        _ => Expr::Binary(BinaryOp::Pow, Box::new(a), Box::new(b)),
    }
}

pub(crate) fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(x) => Expr::Num(-x),
        Expr::Unary(UnaryOp::Neg, inner) => *inner,
        _ => Expr::Unary(UnaryOp::Neg, Box::new(a)),
    }
}

// Printing with minimal parentheses. `parse(print(e)) == e` for every AST
// the parser or differentiator can produce.

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
        Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
        Expr::Unary(UnaryOp::Neg, _) => 3,
        // Negative literals print with a leading '-', so they bind like a
        // unary minus for parenthesization purposes.
        Expr::Num(c) if *c < 0.0 => 3,
        Expr::Binary(BinaryOp::Pow, ..) => 4,
        _ => 5,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, wrap: bool) -> fmt::Result {
            if wrap {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Num(c) => {
                if c.is_infinite() {
                    write!(f, "{}inf", if *c < 0.0 { "-" } else { "" })
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Ind { lo, hi } => {
                if hi.is_infinite() {
                    write!(f, "ind({lo},inf)")
                } else {
                    write!(f, "ind({lo},{hi})")
                }
            }
            Expr::Unary(UnaryOp::Neg, a) => {
                write!(f, "-")?;
                child(f, a, precedence(a) < 3)
            }
            Expr::Unary(op, a) => write!(f, "{}({})", op.name(), a),
            Expr::Binary(op, a, b) => {
                let p = precedence(self);
                let (sym, left_wrap, right_wrap) = match op {
                    BinaryOp::Add => ("+", precedence(a) < p, precedence(b) < p),
                    BinaryOp::Sub => ("-", precedence(a) < p, precedence(b) <= p),
                    BinaryOp::Mul => ("*", precedence(a) < p, precedence(b) < p),
                    BinaryOp::Div => ("/", precedence(a) < p, precedence(b) <= p),
                    // '^' is right-associative and binds tighter than unary
                    // minus, so a negative or compound base needs parens.
                    BinaryOp::Pow => ("^", precedence(a) <= p, precedence(b) < p),
                };
                child(f, a, left_wrap)?;
                write!(f, "{sym}")?;
                child(f, b, right_wrap)
            }
        }
    }
}
