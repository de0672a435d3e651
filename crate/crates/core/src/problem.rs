//! Problem instances: dynamics, costs, constraint sets, and the candidate
//! process under scrutiny.

use crate::expr::{diff_expr, Expr, Var};
use serde::Serialize;
use thiserror::Error;

/// Axis-aligned box of admissible control values.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ControlBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.len() == self.dim()
            && u.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&lo, &hi))| v >= lo - tol && v <= hi + tol)
    }

    /// Corner points of the box, 2^k of them.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let k = self.dim();
        let mut out = Vec::with_capacity(1 << k);
        for mask in 0..(1usize << k) {
            out.push(
                (0..k)
                    .map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] })
                    .collect(),
            );
        }
        out
    }

    /// Regular lattice with `points` samples per axis, plus the vertices.
    /// Duplicates are removed; order is deterministic.
    pub fn sample_grid(&self, points: usize) -> Vec<Vec<f64>> {
        let k = self.dim();
        let points = points.max(2);
        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(k);
        for i in 0..k {
            let (lo, hi) = (self.lo[i], self.hi[i]);
            axes.push(
                (0..points)
                    .map(|j| lo + (hi - lo) * j as f64 / (points - 1) as f64)
                    .collect(),
            );
        }
        let mut out: Vec<Vec<f64>> = Vec::new();
        let mut idx = vec![0usize; k];
        loop {
            out.push((0..k).map(|i| axes[i][idx[i]]).collect());
            let mut axis = 0;
            loop {
                if axis == k {
                    // lattice exhausted; append vertices and dedup
                    for v in self.vertices() {
                        if !out.iter().any(|w| w == &v) {
                            out.push(v);
                        }
                    }
                    return out;
                }
                idx[axis] += 1;
                if idx[axis] < points {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
        }
    }
}

/// Constraint set for the initial state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialSet {
    Free,
    Point(Vec<f64>),
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitialSet {
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            InitialSet::Free => true,
            InitialSet::Point(p) => {
                p.len() == x.len() && p.iter().zip(x).all(|(&a, &b)| (a - b).abs() <= tol)
            }
            InitialSet::Box { lo, hi } => {
                lo.len() == x.len()
                    && x.iter()
                        .zip(lo.iter().zip(hi))
                        .all(|(&v, (&l, &h))| v >= l - tol && v <= h + tol)
            }
        }
    }
}

/// A concrete control law for the candidate or a challenger.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSignal {
    /// Constant on `[t_i, t_{i+1})`; the last segment extends to infinity.
    /// Breakpoints are strictly increasing and start at 0.
    PiecewiseConstant(Vec<(f64, Vec<f64>)>),
    /// One expression of `t` per control component.
    ExprOfT(Vec<Expr>),
}

impl ControlSignal {
    pub fn constant(values: Vec<f64>) -> Self {
        ControlSignal::PiecewiseConstant(vec![(0.0, values)])
    }

    /// Control value at `t`. Piecewise lookup uses `t_window` so that an
    /// integrator can hold the active segment fixed across a step; smooth
    /// expressions use the true `t`.
    pub fn value_in_window(&self, t: f64, t_window: f64, out: &mut [f64]) {
        match self {
            ControlSignal::PiecewiseConstant(segments) => {
                let mut active = &segments[0].1;
                for (start, values) in segments {
                    if *start <= t_window {
                        active = values;
                    } else {
                        break;
                    }
                }
                out.copy_from_slice(active);
            }
            ControlSignal::ExprOfT(exprs) => {
                for (slot, e) in out.iter_mut().zip(exprs) {
                    // Control expressions are over t only, so state/control
                    // slices are empty and evaluation cannot fail except on
                    // domain errors, which surface as NaN here and trip the
                    // integrator's finiteness guard.
                    *slot = e.eval_in_window(t, t_window, &[], &[]).unwrap_or(f64::NAN);
                }
            }
        }
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        let k = match self {
            ControlSignal::PiecewiseConstant(s) => s[0].1.len(),
            ControlSignal::ExprOfT(e) => e.len(),
        };
        let mut out = vec![0.0; k];
        self.value_in_window(t, t, &mut out);
        out
    }

    /// Times where the signal may jump.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            ControlSignal::PiecewiseConstant(segments) => {
                segments.iter().map(|(t, _)| *t).filter(|&t| t > 0.0).collect()
            }
            ControlSignal::ExprOfT(exprs) => {
                let mut out = Vec::new();
                for e in exprs {
                    e.collect_breakpoints(&mut out);
                }
                out
            }
        }
    }
}

/// Sorted, deduplicated, finite time values the integrator must not step
/// across: every `ind` bound plus every control-signal jump.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Breakpoints(Vec<f64>);

impl Breakpoints {
    pub fn from_times(times: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = times.into_iter().filter(|t| t.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        Breakpoints(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Breakpoints strictly inside `(a, b)`.
    pub fn within(&self, a: f64, b: f64) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().copied().filter(move |&t| t > a && t < b)
    }

    pub fn contains(&self, t: f64, tol: f64) -> bool {
        self.0.iter().any(|&b| (b - t).abs() <= tol)
    }
}

/// Numeric knobs, echoed into every report so a verdict is reproducible
/// from the report alone.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NumericSettings {
    /// Base Runge-Kutta step in model time.
    pub step: f64,
    /// Abort integration when the state norm exceeds this.
    pub blowup_norm: f64,
    /// Keep every integrator step up to this many samples, then thin.
    pub max_stored: usize,
    /// Geometric horizon grid for limit probes.
    pub grid: HorizonGrid,
    /// Absolute tolerance for limit detection.
    pub tol_abs: f64,
    /// Relative tolerance for limit detection.
    pub tol_rel: f64,
    /// Tail window length for limit detection and liminf estimates.
    pub window: usize,
    /// Tolerance for pointwise identities (Hamiltonian gaps, transversality).
    pub identity_tol: f64,
    /// Tolerance for limit-based checks (limiting approach, tail infima).
    pub limit_tol: f64,
    /// Residual threshold for the adjoint self-consistency check.
    pub adjoint_tol: f64,
    /// Initial shell radius for joint-limit probing.
    pub radius: f64,
    /// Number of shrinking shells in the joint-limit probe.
    pub shells: usize,
    /// Lattice points per control axis in maximum checks.
    pub u_lattice: usize,
    /// Number of time samples for pointwise condition checks.
    pub t_samples: usize,
    /// Right end of the time range for pointwise condition checks.
    pub check_horizon: f64,
    /// Central-difference step for gradient cross-checks.
    pub fd_step: f64,
}

impl Default for NumericSettings {
    fn default() -> Self {
        NumericSettings {
            step: 1e-3,
            blowup_norm: 1e12,
            max_stored: 1_000_000,
            grid: HorizonGrid::default(),
            tol_abs: 1e-6,
            tol_rel: 1e-8,
            window: 5,
            identity_tol: 1e-6,
            limit_tol: 1e-4,
            adjoint_tol: 1e-5,
            radius: 0.5,
            shells: 8,
            u_lattice: 33,
            t_samples: 21,
            check_horizon: 10.0,
            fd_step: 1e-4,
        }
    }
}

/// Geometric horizon grid `T_j = t0 * ratio^j`, `j = 0..count`. Limits at
/// infinity are probed on exponentially growing horizons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonGrid {
    pub t0: f64,
    pub ratio: f64,
    pub count: usize,
}

impl Default for HorizonGrid {
    fn default() -> Self {
        HorizonGrid { t0: 1.0, ratio: 1.6, count: 16 }
    }
}

impl HorizonGrid {
    pub fn new(t0: f64, ratio: f64, count: usize) -> Self {
        HorizonGrid { t0, ratio, count }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.t0 * self.ratio.powi(j as i32)).collect()
    }

    pub fn max_time(&self) -> f64 {
        self.t0 * self.ratio.powi(self.count.saturating_sub(1) as i32)
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if !(self.t0 > 0.0) || !(self.ratio > 1.0) || self.count < 4 {
            return Err(ProblemError::InvalidGrid {
                t0: self.t0,
                ratio: self.ratio,
                count: self.count,
            });
        }
        Ok(())
    }
}

/// A full problem instance together with the candidate process.
///
/// The problem is: minimize `l(x(0)) + integral of f0(t,x,u) dt over [0,inf)`
/// subject to `dx/dt = f(t,x,u)`, `u(t) in U`, `x(0) in C`. The candidate is
/// `(candidate_x0, candidate_control)`; `lambda` weighs the running cost in
/// the Hamiltonian `H = psi . f - lambda * f0`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub dynamics: Vec<Expr>,
    pub running_cost: Expr,
    /// Salvage term on the initial state; an expression over `x` only.
    pub salvage: Expr,
    pub control_box: ControlBox,
    pub initial_set: InitialSet,
    pub candidate_control: ControlSignal,
    pub candidate_x0: Vec<f64>,
    pub lambda: f64,
    pub settings: NumericSettings,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProblemError {
    #[error("state dimension must be between 1 and 9, got {0}")]
    BadStateDim(usize),
    #[error("control dimension must be between 1 and 9, got {0}")]
    BadControlDim(usize),
    #[error("expected {expected} dynamics expressions, got {got}")]
    DynamicsCount { expected: usize, got: usize },
    #[error("{what} has wrong length: expected {expected}, got {got}")]
    BadLength { what: &'static str, expected: usize, got: usize },
    #[error("control box must satisfy lo <= hi on every axis")]
    EmptyControlBox,
    #[error("initial box must satisfy lo <= hi on every axis")]
    EmptyInitialBox,
    #[error("candidate initial state is not in the initial set")]
    X0NotInInitialSet,
    #[error("candidate control leaves the control box at t = {t}")]
    ControlOutsideBox { t: f64 },
    #[error("piecewise control breakpoints must be strictly increasing and start at 0")]
    BadPiecewiseBreakpoints,
    #[error("salvage must be an expression over the state only")]
    SalvageNotStateOnly,
    #[error("control expressions must depend on t only")]
    ControlExprNotTimeOnly,
    #[error("lambda must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("horizon grid invalid: t0 = {t0}, ratio = {ratio}, count = {count}; need t0 > 0, ratio > 1, count >= 4")]
    InvalidGrid { t0: f64, ratio: f64, count: usize },
    #[error("numeric settings invalid: {0}")]
    InvalidSettings(String),
}

impl ProblemSpec {
    /// Check every structural invariant. Control admissibility is sampled on
    /// `[0, check_horizon]` plus all breakpoints.
    pub fn validate(&self) -> Result<(), ProblemError> {
        let m = self.state_dim;
        let k = self.control_dim;
        if m == 0 || m > 9 {
            return Err(ProblemError::BadStateDim(m));
        }
        if k == 0 || k > 9 {
            return Err(ProblemError::BadControlDim(k));
        }
        if self.dynamics.len() != m {
            return Err(ProblemError::DynamicsCount { expected: m, got: self.dynamics.len() });
        }
        if self.candidate_x0.len() != m {
            return Err(ProblemError::BadLength {
                what: "candidate_x0",
                expected: m,
                got: self.candidate_x0.len(),
            });
        }
        if self.control_box.lo.len() != k || self.control_box.hi.len() != k {
            return Err(ProblemError::BadLength {
                what: "control_box",
                expected: k,
                got: self.control_box.lo.len(),
            });
        }
        if self.control_box.lo.iter().zip(&self.control_box.hi).any(|(l, h)| l > h) {
            return Err(ProblemError::EmptyControlBox);
        }
        match &self.initial_set {
            InitialSet::Free => {}
            InitialSet::Point(p) => {
                if p.len() != m {
                    return Err(ProblemError::BadLength {
                        what: "initial_set point",
                        expected: m,
                        got: p.len(),
                    });
                }
            }
            InitialSet::Box { lo, hi } => {
                if lo.len() != m || hi.len() != m {
                    return Err(ProblemError::BadLength {
                        what: "initial_set box",
                        expected: m,
                        got: lo.len(),
                    });
                }
                if lo.iter().zip(hi).any(|(l, h)| l > h) {
                    return Err(ProblemError::EmptyInitialBox);
                }
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(ProblemError::NegativeLambda(self.lambda));
        }
        if self.salvage.references_time() || self.salvage.references_control() {
            return Err(ProblemError::SalvageNotStateOnly);
        }
        if !self.initial_set.contains(&self.candidate_x0, 1e-9) {
            return Err(ProblemError::X0NotInInitialSet);
        }
        self.validate_signal(&self.candidate_control)?;
        self.settings.grid.validate()?;
        if !(self.settings.step > 0.0) {
            return Err(ProblemError::InvalidSettings(format!(
                "step must be positive, got {}",
                self.settings.step
            )));
        }
        if self.settings.window < 2 {
            return Err(ProblemError::InvalidSettings(
                "window must be at least 2".into(),
            ));
        }
        if self.settings.shells < 8 {
            return Err(ProblemError::InvalidSettings(
                "joint probe needs at least 8 shells".into(),
            ));
        }
        if !(self.settings.radius > 0.0) {
            return Err(ProblemError::InvalidSettings(
                "probe radius must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Validate a control signal against this problem (used for the
    /// candidate and for challengers).
    pub fn validate_signal(&self, signal: &ControlSignal) -> Result<(), ProblemError> {
        let k = self.control_dim;
        match signal {
            ControlSignal::PiecewiseConstant(segments) => {
                if segments.is_empty() || segments[0].0 != 0.0 {
                    return Err(ProblemError::BadPiecewiseBreakpoints);
                }
                for w in segments.windows(2) {
                    if !(w[0].0 < w[1].0) {
                        return Err(ProblemError::BadPiecewiseBreakpoints);
                    }
                }
                for (t, values) in segments {
                    if values.len() != k {
                        return Err(ProblemError::BadLength {
                            what: "piecewise control value",
                            expected: k,
                            got: values.len(),
                        });
                    }
                    if !self.control_box.contains(values, 1e-9) {
                        return Err(ProblemError::ControlOutsideBox { t: *t });
                    }
                }
            }
            ControlSignal::ExprOfT(exprs) => {
                if exprs.len() != k {
                    return Err(ProblemError::BadLength {
                        what: "control expressions",
                        expected: k,
                        got: exprs.len(),
                    });
                }
                for e in exprs {
                    if e.references_state() || e.references_control() {
                        return Err(ProblemError::ControlExprNotTimeOnly);
                    }
                }
                // Sample admissibility on a fixed grid plus breakpoints.
                let horizon = self.settings.check_horizon.max(1.0);
                let mut ts: Vec<f64> =
                    (0..=1000).map(|i| horizon * i as f64 / 1000.0).collect();
                ts.extend(signal.breakpoints());
                let mut u = vec![0.0; k];
                for t in ts {
                    signal.value_in_window(t, t, &mut u);
                    if !self.control_box.contains(&u, 1e-9) {
                        return Err(ProblemError::ControlOutsideBox { t });
                    }
                }
            }
        }
        Ok(())
    }

    /// Breakpoints of the problem data: `ind` bounds in `f` and `f0` plus
    /// candidate-control jumps.
    pub fn breakpoints(&self) -> Breakpoints {
        let mut times = Vec::new();
        for e in &self.dynamics {
            e.collect_breakpoints(&mut times);
        }
        self.running_cost.collect_breakpoints(&mut times);
        times.extend(self.candidate_control.breakpoints());
        Breakpoints::from_times(times)
    }

    /// Breakpoints including the jumps of an extra signal (a challenger).
    pub fn breakpoints_with(&self, signal: &ControlSignal) -> Breakpoints {
        let mut times = self.breakpoints().0;
        times.extend(signal.breakpoints());
        Breakpoints::from_times(times)
    }

    /// Candidate control value at time `t`.
    pub fn candidate_u(&self, t: f64) -> Vec<f64> {
        self.candidate_control.value(t)
    }

    /// Pre-differentiated problem data for the integrators.
    pub fn compile(&self) -> CompiledProblem<'_> {
        CompiledProblem::new(self)
    }
}

/// Cached symbolic derivatives of `f`, `f0`, and `l`. Differentiation is
/// done once per problem; the integrators evaluate these trees millions of
/// times.
pub struct CompiledProblem<'a> {
    pub spec: &'a ProblemSpec,
    /// Jacobian entries `d f_i / d x_j`, row-major `i * m + j`.
    pub dynamics_jac: Vec<Expr>,
    /// Gradient entries `d f0 / d x_j`.
    pub cost_grad: Vec<Expr>,
    /// Gradient entries `d l / d x_j`.
    pub salvage_grad: Vec<Expr>,
}

impl<'a> CompiledProblem<'a> {
    fn new(spec: &'a ProblemSpec) -> Self {
        let m = spec.state_dim;
        let mut dynamics_jac = Vec::with_capacity(m * m);
        for fi in &spec.dynamics {
            for j in 0..m {
                dynamics_jac.push(
                    diff_expr(fi, Var::State(j)).expect("state differentiation cannot fail"),
                );
            }
        }
        let cost_grad = (0..m)
            .map(|j| {
                diff_expr(&spec.running_cost, Var::State(j))
                    .expect("state differentiation cannot fail")
            })
            .collect();
        let salvage_grad = (0..m)
            .map(|j| {
                diff_expr(&spec.salvage, Var::State(j))
                    .expect("state differentiation cannot fail")
            })
            .collect();
        CompiledProblem { spec, dynamics_jac, cost_grad, salvage_grad }
    }

    /// Gradient of the salvage term at `x`.
    pub fn salvage_gradient(&self, x: &[f64]) -> Vec<f64> {
        self.salvage_grad
            .iter()
            .map(|e| e.eval(0.0, x, &[]).unwrap_or(f64::NAN))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn toy_spec() -> ProblemSpec {
        ProblemSpec {
            state_dim: 1,
            control_dim: 1,
            dynamics: vec![parse_expr("u1", 1, 1).unwrap()],
            running_cost: parse_expr("exp(-t)*x1", 1, 1).unwrap(),
            salvage: parse_expr("0", 1, 1).unwrap(),
            control_box: ControlBox { lo: vec![-1.0], hi: vec![1.0] },
            initial_set: InitialSet::Point(vec![1.0]),
            candidate_control: ControlSignal::constant(vec![-1.0]),
            candidate_x0: vec![1.0],
            lambda: 1.0,
            settings: NumericSettings::default(),
        }
    }

    #[test]
    fn valid_spec_passes() {
        toy_spec().validate().unwrap();
    }

    #[test]
    fn x0_outside_initial_set_rejected() {
        let mut spec = toy_spec();
        spec.candidate_x0 = vec![2.0];
        assert_eq!(spec.validate(), Err(ProblemError::X0NotInInitialSet));
    }

    #[test]
    fn control_outside_box_rejected() {
        let mut spec = toy_spec();
        spec.candidate_control = ControlSignal::constant(vec![3.0]);
        assert!(matches!(
            spec.validate(),
            Err(ProblemError::ControlOutsideBox { .. })
        ));
    }

    #[test]
    fn expr_control_sampled_against_box() {
        let mut spec = toy_spec();
        spec.candidate_control =
            ControlSignal::ExprOfT(vec![parse_expr("2*sin(t)", 1, 1).unwrap()]);
        assert!(matches!(
            spec.validate(),
            Err(ProblemError::ControlOutsideBox { .. })
        ));
        spec.candidate_control =
            ControlSignal::ExprOfT(vec![parse_expr("0.5*sin(t)", 1, 1).unwrap()]);
        spec.validate().unwrap();
    }

    #[test]
    fn negative_lambda_rejected() {
        let mut spec = toy_spec();
        spec.lambda = -0.5;
        assert_eq!(spec.validate(), Err(ProblemError::NegativeLambda(-0.5)));
    }

    #[test]
    fn salvage_over_state_only() {
        let mut spec = toy_spec();
        spec.salvage = parse_expr("x1*t", 1, 1).unwrap();
        assert_eq!(spec.validate(), Err(ProblemError::SalvageNotStateOnly));
    }

    #[test]
    fn piecewise_breakpoints_checked() {
        let mut spec = toy_spec();
        spec.candidate_control = ControlSignal::PiecewiseConstant(vec![
            (0.0, vec![0.0]),
            (2.0, vec![0.5]),
            (1.0, vec![0.1]),
        ]);
        assert_eq!(spec.validate(), Err(ProblemError::BadPiecewiseBreakpoints));
        spec.candidate_control =
            ControlSignal::PiecewiseConstant(vec![(1.0, vec![0.0])]);
        assert_eq!(spec.validate(), Err(ProblemError::BadPiecewiseBreakpoints));
    }

    #[test]
    fn piecewise_value_uses_window_time() {
        let u = ControlSignal::PiecewiseConstant(vec![
            (0.0, vec![1.0]),
            (1.0, vec![2.0]),
        ]);
        assert_eq!(u.value(0.5), vec![1.0]);
        assert_eq!(u.value(1.0), vec![2.0]);
        let mut out = [0.0];
        u.value_in_window(1.0, 0.999, &mut out);
        assert_eq!(out, [1.0]);
    }

    #[test]
    fn breakpoints_merge_ind_and_control() {
        let mut spec = toy_spec();
        spec.dynamics = vec![parse_expr("u1*ind(0,1)", 1, 1).unwrap()];
        spec.candidate_control = ControlSignal::PiecewiseConstant(vec![
            (0.0, vec![0.0]),
            (0.5, vec![0.5]),
        ]);
        assert_eq!(spec.breakpoints().as_slice(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn horizon_grid_times_are_geometric() {
        let g = HorizonGrid::new(2.0, 1.5, 4);
        assert_eq!(g.times(), vec![2.0, 3.0, 4.5, 6.75]);
        assert_eq!(g.max_time(), 6.75);
    }

    #[test]
    fn sample_grid_includes_vertices() {
        let b = ControlBox { lo: vec![-1.0, 0.0], hi: vec![1.0, 2.0] };
        let grid = b.sample_grid(3);
        for v in b.vertices() {
            assert!(grid.contains(&v));
        }
        assert_eq!(grid.len(), 9); // 3x3 lattice already contains the corners
    }
}
