//! Fixed-step integration of the state equation, the fundamental-matrix
//! (variational) equation, the running payoff, and its gradient.
//!
//! Everything runs through one classical RK4 driver whose steps are snapped
//! to every known discontinuity of the data: `ind` bounds and control-signal
//! jumps. Within a step the active time window is resolved at the step
//! midpoint, so each RK4 step sees a smooth right-hand side and the scheme
//! keeps its fourth order on every segment.
//!
//! The augmented system packs, in order: the state `x` (m), optionally the
//! fundamental matrix `A` (m*m, row-major), optionally the running payoff
//! (1), optionally the payoff-gradient accumulator (m). Solving them in a
//! single pass keeps the Cauchy-formula identity between `A`, the gradient,
//! and the adjoint numerically consistent.

use crate::expr::EvalError;
use crate::problem::{Breakpoints, CompiledProblem, ControlSignal, ProblemSpec};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum IntegrationError {
    #[error("integration diverged: state norm exceeded {guard:.3e} at t = {t}")]
    Diverged { t: f64, guard: f64 },
    #[error("expression domain error at t = {t}: {source}")]
    Domain { t: f64, source: EvalError },
    #[error("invalid horizon: need t_end > theta >= 0, got theta = {theta}, t_end = {t_end}")]
    InvalidHorizon { theta: f64, t_end: f64 },
}

/// A time-gridded path with enough slope information for cubic Hermite
/// dense output between stored integrator steps.
#[derive(Debug, Clone)]
pub struct SampledPath {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// Slope at `grid[i]` valid for the interval to its right.
    slope_out: Vec<Vec<f64>>,
    /// Slope at `grid[i]` valid for the interval to its left.
    slope_in: Vec<Vec<f64>>,
}

impl SampledPath {
    /// Wrap externally produced samples, deriving interpolation slopes by
    /// central differences on the grid.
    pub fn from_samples(grid: Vec<f64>, values: Vec<Vec<f64>>) -> Self {
        assert!(grid.len() == values.len() && grid.len() >= 2);
        let n = grid.len();
        let dim = values[0].len();
        let mut slopes = Vec::with_capacity(n);
        for i in 0..n {
            let (lo, hi) = if i == 0 {
                (0, 1)
            } else if i + 1 == n {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            let dt = grid[hi] - grid[lo];
            slopes.push(
                (0..dim)
                    .map(|j| (values[hi][j] - values[lo][j]) / dt)
                    .collect::<Vec<f64>>(),
            );
        }
        SampledPath { grid, values, slope_out: slopes.clone(), slope_in: slopes }
    }

    pub fn dim(&self) -> usize {
        self.values.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn start_time(&self) -> f64 {
        self.grid[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn end_value(&self) -> &[f64] {
        self.values.last().unwrap()
    }

    /// Cubic Hermite interpolation; clamps outside the grid span. Exact grid
    /// hits return the stored sample.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let n = self.grid.len();
        if t <= self.grid[0] {
            return self.values[0].clone();
        }
        if t >= self.grid[n - 1] {
            return self.values[n - 1].clone();
        }
        let hi = self.grid.partition_point(|&g| g < t);
        if self.grid[hi] == t {
            return self.values[hi].clone();
        }
        let lo = hi - 1;
        let dt = self.grid[hi] - self.grid[lo];
        let s = (t - self.grid[lo]) / dt;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        (0..self.dim())
            .map(|j| {
                h00 * self.values[lo][j]
                    + h10 * dt * self.slope_out[lo][j]
                    + h01 * self.values[hi][j]
                    + h11 * dt * self.slope_in[hi][j]
            })
            .collect()
    }
}

/// Output of one driver run.
pub(crate) struct DriveOutput {
    pub path: Option<SampledPath>,
    /// `(t, y)` at each requested checkpoint that was reached, in request order.
    pub checkpoints: Vec<(f64, Vec<f64>)>,
    pub final_state: Vec<f64>,
    /// Set when the run aborted (blow-up or domain error); data above covers
    /// the part of the span that was completed.
    pub aborted: Option<IntegrationError>,
}

/// Classical RK4 with fixed base step, steps snapped to `boundaries` and
/// `checkpoints`. The right-hand side receives `(t, t_window, y, dydt)`.
pub(crate) fn rk4_drive<F>(
    mut rhs: F,
    t0: f64,
    t1: f64,
    y0: &[f64],
    step: f64,
    boundaries: &Breakpoints,
    checkpoints: &[f64],
    store: Option<usize>,
    blowup_norm: f64,
) -> DriveOutput
where
    F: FnMut(f64, f64, &[f64], &mut [f64]) -> Result<(), EvalError>,
{
    assert!(t1 > t0 && step > 0.0);
    let dim = y0.len();

    // Knots: segment ends the integrator must land on exactly.
    let mut knots: Vec<f64> = vec![t0, t1];
    knots.extend(boundaries.within(t0, t1));
    knots.extend(checkpoints.iter().copied().filter(|&c| c > t0 && c < t1));
    knots.sort_by(f64::total_cmp);
    knots.dedup();

    let total_steps: usize = knots
        .windows(2)
        .map(|w| ((w[1] - w[0]) / step).ceil().max(1.0) as usize)
        .sum();
    let keep_every = match store {
        Some(max) if max > 0 => (total_steps / max).max(1),
        _ => 1,
    };

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];

    let mut grid = Vec::new();
    let mut values = Vec::new();
    let mut slope_out: Vec<Vec<f64>> = Vec::new();
    let mut slope_in: Vec<Vec<f64>> = Vec::new();
    let mut recorded = Vec::new();

    let record_checkpoints = |t: f64, y: &[f64], out: &mut Vec<(f64, Vec<f64>)>| {
        for &c in checkpoints {
            if c == t || (c <= t0 && t == t0) || (c >= t1 && t == t1) {
                out.push((c, y.to_vec()));
            }
        }
    };
    record_checkpoints(t0, &y, &mut recorded);

    let storing = store.is_some();
    if storing {
        grid.push(t0);
        values.push(y.clone());
    }

    let mut aborted = None;
    let mut global_step = 0usize;
    'outer: for seg in knots.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let n = ((b - a) / step).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        for i in 0..n {
            let t = a + i as f64 * h;
            let t_next = if i + 1 == n { b } else { a + (i + 1) as f64 * h };
            let h = t_next - t;
            let tw = t + 0.5 * h;

            let stage = |e: EvalError| IntegrationError::Domain { t, source: e };
            if let Err(e) = rhs(t, tw, &y, &mut k1) {
                aborted = Some(stage(e));
                break 'outer;
            }
            if storing {
                // Slope leaving the previous stored sample. When thinning,
                // only the first step after a kept sample provides it.
                if slope_out.len() + 1 == values.len() {
                    slope_out.push(k1.clone());
                }
            }
            for j in 0..dim {
                tmp[j] = y[j] + 0.5 * h * k1[j];
            }
            if let Err(e) = rhs(t + 0.5 * h, tw, &tmp, &mut k2) {
                aborted = Some(stage(e));
                break 'outer;
            }
            for j in 0..dim {
                tmp[j] = y[j] + 0.5 * h * k2[j];
            }
            if let Err(e) = rhs(t + 0.5 * h, tw, &tmp, &mut k3) {
                aborted = Some(stage(e));
                break 'outer;
            }
            for j in 0..dim {
                tmp[j] = y[j] + h * k3[j];
            }
            if let Err(e) = rhs(t_next, tw, &tmp, &mut k4) {
                aborted = Some(stage(e));
                break 'outer;
            }
            for j in 0..dim {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }

            let norm2: f64 = y.iter().map(|v| v * v).sum();
            if !norm2.is_finite() || norm2 > blowup_norm * blowup_norm {
                aborted = Some(IntegrationError::Diverged { t: t_next, guard: blowup_norm });
                break 'outer;
            }

            global_step += 1;
            if storing {
                let is_knot = i + 1 == n;
                if is_knot || global_step % keep_every == 0 {
                    grid.push(t_next);
                    values.push(y.clone());
                    // k4 approximates the slope at the step end within the
                    // same window; good to the interpolation's own order.
                    slope_in.resize(values.len() - 1, Vec::new());
                    slope_in.push(k4.clone());
                }
            }
        }
        record_checkpoints(b, &y, &mut recorded);
    }

    let path = if storing {
        // Fill any slope slots skipped by thinning or an abort with
        // one-sided copies; they are only used for dense output.
        while slope_out.len() < values.len() {
            let i = slope_out.len();
            let fallback = slope_in
                .get(i)
                .filter(|v| !v.is_empty())
                .cloned()
                .unwrap_or_else(|| vec![0.0; dim]);
            slope_out.push(fallback);
        }
        slope_in.resize(values.len(), Vec::new());
        for i in 0..values.len() {
            if slope_in[i].is_empty() {
                slope_in[i] = slope_out[i].clone();
            }
        }
        Some(SampledPath { grid, values, slope_out, slope_in })
    } else {
        None
    };

    DriveOutput { path, checkpoints: recorded, final_state: y, aborted }
}

/// Which blocks ride along in the augmented vector.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Parts {
    pub fundamental: bool,
    pub payoff: bool,
    pub gradient: bool,
}

impl Parts {
    fn dim(&self, m: usize) -> usize {
        let mut d = m;
        if self.fundamental {
            d += m * m;
        }
        if self.payoff {
            d += 1;
        }
        if self.gradient {
            debug_assert!(self.fundamental, "gradient accumulator needs the fundamental matrix");
            d += m;
        }
        d
    }
}

/// Build the augmented right-hand side for a compiled problem and control.
fn augmented_rhs<'a>(
    compiled: &'a CompiledProblem<'a>,
    control: &'a ControlSignal,
    parts: Parts,
) -> impl FnMut(f64, f64, &[f64], &mut [f64]) -> Result<(), EvalError> + 'a {
    let m = compiled.spec.state_dim;
    let k = compiled.spec.control_dim;
    let mut u = vec![0.0; k];
    let mut jac = vec![0.0; m * m];
    let mut grad = vec![0.0; m];
    move |t: f64, tw: f64, y: &[f64], dydt: &mut [f64]| {
        control.value_in_window(t, tw, &mut u);
        let x = &y[..m];
        for (i, fi) in compiled.spec.dynamics.iter().enumerate() {
            dydt[i] = fi.eval_in_window(t, tw, x, &u)?;
        }
        let mut offset = m;
        if parts.fundamental {
            for (slot, e) in jac.iter_mut().zip(&compiled.dynamics_jac) {
                *slot = e.eval_in_window(t, tw, x, &u)?;
            }
            let a = &y[offset..offset + m * m];
            for i in 0..m {
                for j in 0..m {
                    let mut acc = 0.0;
                    for l in 0..m {
                        acc += jac[i * m + l] * a[l * m + j];
                    }
                    dydt[offset + i * m + j] = acc;
                }
            }
            offset += m * m;
        }
        if parts.payoff {
            dydt[offset] = compiled.spec.running_cost.eval_in_window(t, tw, x, &u)?;
            offset += 1;
        }
        if parts.gradient {
            for (slot, e) in grad.iter_mut().zip(&compiled.cost_grad) {
                *slot = e.eval_in_window(t, tw, x, &u)?;
            }
            let a_off = m;
            let a = &y[a_off..a_off + m * m];
            for j in 0..m {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += grad[i] * a[i * m + j];
                }
                dydt[offset + j] = acc;
            }
        }
        Ok(())
    }
}

fn initial_augmented(b: &[f64], m: usize, parts: Parts) -> Vec<f64> {
    let mut y0 = Vec::with_capacity(parts.dim(m));
    y0.extend_from_slice(b);
    if parts.fundamental {
        for i in 0..m {
            for j in 0..m {
                y0.push(if i == j { 1.0 } else { 0.0 });
            }
        }
    }
    if parts.payoff {
        y0.push(0.0);
    }
    if parts.gradient {
        y0.extend(std::iter::repeat(0.0).take(m));
    }
    y0
}

pub(crate) fn run_augmented(
    spec: &ProblemSpec,
    b: &[f64],
    theta: f64,
    control: &ControlSignal,
    t_end: f64,
    parts: Parts,
    checkpoints: &[f64],
    store: bool,
) -> DriveOutput {
    let compiled = spec.compile();
    let mut rhs = augmented_rhs(&compiled, control, parts);
    let y0 = initial_augmented(b, spec.state_dim, parts);
    let boundaries = spec.breakpoints_with(control);
    rk4_drive(
        &mut rhs,
        theta,
        t_end,
        &y0,
        spec.settings.step,
        &boundaries,
        checkpoints,
        store.then_some(spec.settings.max_stored),
        spec.settings.blowup_norm,
    )
}

fn check_span(theta: f64, t_end: f64) -> Result<(), IntegrationError> {
    if theta >= 0.0 && t_end > theta {
        Ok(())
    } else {
        Err(IntegrationError::InvalidHorizon { theta, t_end })
    }
}

/// State path `y(b, theta, u; .)` on `[theta, t_end]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    path: SampledPath,
}

impl Trajectory {
    pub fn grid(&self) -> &[f64] {
        &self.path.grid
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.path.values
    }

    pub fn state_at(&self, t: f64) -> Vec<f64> {
        self.path.value_at(t)
    }

    pub fn end_state(&self) -> &[f64] {
        self.path.end_value()
    }
}

/// Fundamental matrix path `A(xi; .)` along the candidate process, with
/// `A(xi; 0)` the identity.
#[derive(Debug, Clone)]
pub struct FundamentalTrajectory {
    pub grid: Vec<f64>,
    /// Row-major `m*m` blocks, one per grid sample.
    flat: Vec<Vec<f64>>,
    m: usize,
}

impl FundamentalTrajectory {
    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn matrix(&self, idx: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.m, &self.flat[idx])
    }

    pub fn end_matrix(&self) -> DMatrix<f64> {
        self.matrix(self.grid.len() - 1)
    }

    /// Determinant at every stored sample. Strict positivity is the
    /// discrete Liouville invariant `det A = exp(integral tr df/dx)`.
    pub fn determinants(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|i| self.matrix(i).determinant()).collect()
    }
}

/// Solve the state equation from `x(theta) = b` under control `u`.
pub fn integrate_state(
    spec: &ProblemSpec,
    b: &[f64],
    theta: f64,
    u: &ControlSignal,
    t_end: f64,
) -> Result<Trajectory, IntegrationError> {
    check_span(theta, t_end)?;
    let out = run_augmented(spec, b, theta, u, t_end, Parts::default(), &[], true);
    match out.aborted {
        Some(e) => Err(e),
        None => Ok(Trajectory { path: out.path.unwrap() }),
    }
}

/// Solve the variational equation `dA/dt = (df/dx) A`, `A(0) = I`, along
/// the candidate process started at `xi`, co-integrated with the state.
pub fn integrate_fundamental(
    spec: &ProblemSpec,
    xi: &[f64],
    t_end: f64,
) -> Result<FundamentalTrajectory, IntegrationError> {
    check_span(0.0, t_end)?;
    let parts = Parts { fundamental: true, ..Parts::default() };
    let out = run_augmented(
        spec,
        xi,
        0.0,
        &spec.candidate_control,
        t_end,
        parts,
        &[],
        true,
    );
    if let Some(e) = out.aborted {
        return Err(e);
    }
    let path = out.path.unwrap();
    let m = spec.state_dim;
    let flat = path.values.iter().map(|v| v[m..m + m * m].to_vec()).collect();
    Ok(FundamentalTrajectory { grid: path.grid, flat, m })
}

/// Finite-horizon payoff `J(b, theta; u, t_end)`, integrated as an extra
/// component of the same IVP as the state.
pub fn payoff(
    spec: &ProblemSpec,
    b: &[f64],
    theta: f64,
    u: &ControlSignal,
    t_end: f64,
) -> Result<f64, IntegrationError> {
    if t_end == theta {
        return Ok(0.0);
    }
    check_span(theta, t_end)?;
    let parts = Parts { payoff: true, ..Parts::default() };
    let out = run_augmented(spec, b, theta, u, t_end, parts, &[], false);
    match out.aborted {
        Some(e) => Err(e),
        None => Ok(out.final_state[spec.state_dim]),
    }
}

/// Gradient of `xi -> J(xi, theta; u_hat, t_end)` via the variational
/// integral: the running-cost gradient contracted against the fundamental
/// matrix, accumulated in the same augmented IVP.
pub fn payoff_gradient_from(
    spec: &ProblemSpec,
    b: &[f64],
    theta: f64,
    t_end: f64,
) -> Result<Vec<f64>, IntegrationError> {
    check_span(theta, t_end)?;
    let parts = Parts { fundamental: true, payoff: true, gradient: true };
    let out = run_augmented(
        spec,
        b,
        theta,
        &spec.candidate_control,
        t_end,
        parts,
        &[],
        false,
    );
    if let Some(e) = out.aborted {
        return Err(e);
    }
    let m = spec.state_dim;
    let off = m + m * m + 1;
    Ok(out.final_state[off..off + m].to_vec())
}

/// Gradient of the candidate payoff map at `xi` over `[0, t_end]`.
pub fn payoff_gradient(
    spec: &ProblemSpec,
    xi: &[f64],
    t_end: f64,
) -> Result<Vec<f64>, IntegrationError> {
    payoff_gradient_from(spec, xi, 0.0, t_end)
}

/// Fundamental matrix, payoff, and payoff gradient at a single horizon,
/// from one augmented run along the candidate control.
#[derive(Debug, Clone)]
pub struct VariationalProbe {
    pub matrix: DMatrix<f64>,
    pub gradient: Vec<f64>,
    pub payoff: f64,
}

pub fn variational_probe(
    spec: &ProblemSpec,
    b: &[f64],
    t_end: f64,
) -> Result<VariationalProbe, IntegrationError> {
    check_span(0.0, t_end)?;
    let parts = Parts { fundamental: true, payoff: true, gradient: true };
    let out = run_augmented(
        spec,
        b,
        0.0,
        &spec.candidate_control,
        t_end,
        parts,
        &[],
        false,
    );
    if let Some(e) = out.aborted {
        return Err(e);
    }
    let m = spec.state_dim;
    let y = &out.final_state;
    Ok(VariationalProbe {
        matrix: DMatrix::from_row_slice(m, m, &y[m..m + m * m]),
        gradient: y[m + m * m + 1..m + m * m + 1 + m].to_vec(),
        payoff: y[m + m * m],
    })
}

/// Step-halving error estimate: the end-state discrepancy between runs at
/// the configured step and at half of it. A cheap global-accuracy
/// diagnostic for a fixed-step scheme.
pub fn step_halving_error(
    spec: &ProblemSpec,
    b: &[f64],
    theta: f64,
    u: &ControlSignal,
    t_end: f64,
) -> Result<f64, IntegrationError> {
    let full = integrate_state(spec, b, theta, u, t_end)?;
    let mut halved = spec.clone();
    halved.settings.step = spec.settings.step / 2.0;
    let half = integrate_state(&halved, b, theta, u, t_end)?;
    let err = full
        .end_state()
        .iter()
        .zip(half.end_state())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(err)
}

/// Independent oracle for [`payoff_gradient`]: central differences of the
/// payoff in each coordinate of `xi`.
pub fn finite_diff_gradient(
    spec: &ProblemSpec,
    xi: &[f64],
    t_end: f64,
    h: f64,
) -> Result<Vec<f64>, IntegrationError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Vec::with_capacity(xi.len());
    for i in 0..xi.len() {
        let mut plus = xi.to_vec();
        plus[i] += h;
        let mut minus = xi.to_vec();
        minus[i] -= h;
        let jp = payoff(spec, &plus, 0.0, &spec.candidate_control, t_end)?;
        let jm = payoff(spec, &minus, 0.0, &spec.candidate_control, t_end)?;
        g.push((jp - jm) / (2.0 * h));
    }
    Ok(g)
}

/// Payoff `J(b, theta; u, T)` for every horizon `T` in one pass.
pub fn payoff_sweep(
    spec: &ProblemSpec,
    b: &[f64],
    theta: f64,
    control: &ControlSignal,
    horizons: &[f64],
) -> Result<Vec<(f64, f64)>, IntegrationError> {
    let usable: Vec<f64> = horizons.iter().copied().filter(|&t| t > theta).collect();
    let t_end = usable.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    check_span(theta, t_end)?;
    let parts = Parts { payoff: true, ..Parts::default() };
    let out = run_augmented(spec, b, theta, control, t_end, parts, &usable, false);
    if let Some(e) = out.aborted {
        return Err(e);
    }
    let m = spec.state_dim;
    Ok(out.checkpoints.iter().map(|(t, y)| (*t, y[m])).collect())
}

/// One sample of a horizon sweep.
#[derive(Debug, Clone)]
pub struct SweepSample {
    pub horizon: f64,
    pub gradient: Vec<f64>,
    pub payoff: f64,
}

/// Result of a single integration pass with checkpoints at each horizon.
#[derive(Debug, Clone)]
pub struct GradientSweep {
    pub samples: Vec<SweepSample>,
    /// Time at which the run aborted, if it did not reach the last horizon.
    pub truncated_at: Option<f64>,
}

/// Compute `(gradient, payoff)` of the candidate payoff map at `b`, start
/// time `theta`, for every horizon in `horizons`, in one integration pass.
pub fn gradient_sweep(
    spec: &ProblemSpec,
    b: &[f64],
    theta: f64,
    horizons: &[f64],
) -> Result<GradientSweep, IntegrationError> {
    let usable: Vec<f64> = horizons.iter().copied().filter(|&t| t > theta).collect();
    let t_end = usable.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    check_span(theta, t_end)?;
    let parts = Parts { fundamental: true, payoff: true, gradient: true };
    let out = run_augmented(
        spec,
        b,
        theta,
        &spec.candidate_control,
        t_end,
        parts,
        &usable,
        false,
    );
    let m = spec.state_dim;
    let goff = m + m * m + 1;
    let samples: Vec<SweepSample> = out
        .checkpoints
        .iter()
        .map(|(t, y)| SweepSample {
            horizon: *t,
            gradient: y[goff..goff + m].to_vec(),
            payoff: y[m + m * m],
        })
        .collect();
    let truncated_at = match &out.aborted {
        Some(IntegrationError::Diverged { t, .. }) | Some(IntegrationError::Domain { t, .. }) => {
            Some(*t)
        }
        Some(IntegrationError::InvalidHorizon { .. }) | None => None,
    };
    if samples.is_empty() {
        if let Some(e) = out.aborted {
            return Err(e);
        }
    }
    Ok(GradientSweep { samples, truncated_at })
}

/// Co-state path: the state and adjoint co-integrated forward from
/// `(x0_hat, psi0)` under the candidate control. Components are laid out
/// `[x (m) | psi (m)]`.
pub fn integrate_costate_path(
    spec: &ProblemSpec,
    psi0: &[f64],
    lambda: f64,
    t_end: f64,
    checkpoints: &[f64],
    step_override: Option<f64>,
) -> Result<SampledPath, IntegrationError> {
    check_span(0.0, t_end)?;
    let compiled = spec.compile();
    let m = spec.state_dim;
    let k = spec.control_dim;
    let mut u = vec![0.0; k];
    let mut jac = vec![0.0; m * m];
    let mut grad = vec![0.0; m];
    let control = &spec.candidate_control;
    let mut rhs = move |t: f64, tw: f64, y: &[f64], dydt: &mut [f64]| {
        control.value_in_window(t, tw, &mut u);
        let x = &y[..m];
        let psi = &y[m..2 * m];
        for (i, fi) in compiled.spec.dynamics.iter().enumerate() {
            dydt[i] = fi.eval_in_window(t, tw, x, &u)?;
        }
        for (slot, e) in jac.iter_mut().zip(&compiled.dynamics_jac) {
            *slot = e.eval_in_window(t, tw, x, &u)?;
        }
        for (slot, e) in grad.iter_mut().zip(&compiled.cost_grad) {
            *slot = e.eval_in_window(t, tw, x, &u)?;
        }
        // -dpsi/dt = dH/dx = psi . df/dx - lambda df0/dx, componentwise in j.
        for j in 0..m {
            let mut acc = 0.0;
            for i in 0..m {
                acc += psi[i] * jac[i * m + j];
            }
            dydt[m + j] = -acc + lambda * grad[j];
        }
        Ok(())
    };
    let mut y0 = spec.candidate_x0.clone();
    y0.extend_from_slice(psi0);
    let boundaries = spec.breakpoints();
    let out = rk4_drive(
        &mut rhs,
        0.0,
        t_end,
        &y0,
        step_override.unwrap_or(spec.settings.step),
        &boundaries,
        checkpoints,
        Some(spec.settings.max_stored),
        spec.settings.blowup_norm,
    );
    match out.aborted {
        Some(e) => Err(e),
        None => Ok(out.path.unwrap()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use crate::problem::{ControlBox, InitialSet, NumericSettings};

    fn spec_with(
        dynamics: &[&str],
        running_cost: &str,
        m: usize,
        x0: Vec<f64>,
        u_hat: ControlSignal,
    ) -> ProblemSpec {
        ProblemSpec {
            state_dim: m,
            control_dim: 1,
            dynamics: dynamics.iter().map(|s| parse_expr(s, m, 1).unwrap()).collect(),
            running_cost: parse_expr(running_cost, m, 1).unwrap(),
            salvage: parse_expr("0", m, 1).unwrap(),
            control_box: ControlBox { lo: vec![-1.0], hi: vec![1.0] },
            initial_set: InitialSet::Free,
            candidate_control: u_hat,
            candidate_x0: x0,
            lambda: 1.0,
            settings: NumericSettings::default(),
        }
    }

    fn oscillatory_spec() -> ProblemSpec {
        let mut s = spec_with(
            &["u1*ind(0,1)"],
            "0.5*sin(2*x1)*ind(1,2) + (x1/t*cos(t*x1) - sin(t*x1)/(t*t))*ind(2,inf)",
            1,
            vec![0.0],
            ControlSignal::constant(vec![0.0]),
        );
        s.initial_set = InitialSet::Point(vec![0.0]);
        s
    }

    fn discounted_spec() -> ProblemSpec {
        let mut s = spec_with(
            &["u1"],
            "exp(-t)*x1",
            1,
            vec![1.0],
            ControlSignal::constant(vec![-1.0]),
        );
        s.initial_set = InitialSet::Point(vec![1.0]);
        s
    }

    #[test]
    fn zero_control_keeps_state_at_zero() {
        let spec = oscillatory_spec();
        let u = ControlSignal::constant(vec![0.0]);
        let traj = integrate_state(&spec, &[0.0], 0.0, &u, 5.0).unwrap();
        for x in traj.states() {
            assert!(x[0].abs() < 1e-14);
        }
    }

    #[test]
    fn windowed_dynamics_freeze_after_window() {
        // dx/dt = u on [0,1) then 0: x(t) = c * min(t, 1).
        let spec = oscillatory_spec();
        let c = 0.7;
        let u = ControlSignal::constant(vec![c]);
        let traj = integrate_state(&spec, &[0.0], 0.0, &u, 3.0).unwrap();
        let at = |t: f64| traj.state_at(t)[0];
        assert!((at(0.5) - c * 0.5).abs() < 1e-10);
        assert!((at(1.0) - c).abs() < 1e-10);
        assert!((at(3.0) - c).abs() < 1e-12);
    }

    #[test]
    fn zero_dynamics_is_constant_for_any_control() {
        let spec = spec_with(&["0"], "x1", 1, vec![2.5], ControlSignal::constant(vec![0.3]));
        let u = ControlSignal::constant(vec![0.9]);
        let traj = integrate_state(&spec, &[2.5], 0.0, &u, 4.0).unwrap();
        for x in traj.states() {
            assert_eq!(x[0], 2.5);
        }
    }

    #[test]
    fn fundamental_matrix_identity_for_state_free_dynamics() {
        let spec = oscillatory_spec();
        let fund = integrate_fundamental(&spec, &[0.3], 6.0).unwrap();
        for i in 0..fund.grid.len() {
            assert!((fund.matrix(i)[(0, 0)] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn fundamental_matrix_matches_exponential_oracle() {
        // dx/dt = x has A(t) = e^t in closed form.
        let spec = spec_with(&["x1"], "0", 1, vec![1.0], ControlSignal::constant(vec![0.0]));
        let fund = integrate_fundamental(&spec, &[1.0], 3.0).unwrap();
        for (i, &t) in fund.grid.iter().enumerate() {
            let want = t.exp();
            assert!(
                (fund.matrix(i)[(0, 0)] - want).abs() / want < 1e-10,
                "t = {t}"
            );
        }
        assert!(fund.determinants().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn fundamental_matrix_near_zero_horizon_is_identity() {
        let spec = discounted_spec();
        let fund = integrate_fundamental(&spec, &[1.0], 1e-6).unwrap();
        assert!((fund.matrix(0)[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((fund.end_matrix()[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn payoff_of_empty_interval_is_zero() {
        let spec = discounted_spec();
        let u = ControlSignal::constant(vec![0.0]);
        assert_eq!(payoff(&spec, &[1.0], 2.0, &u, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn discounted_payoff_matches_antiderivative() {
        // f0 = e^{-t} x, f = u, u = 0, b = 1: J = 1 - e^{-T}.
        let spec = discounted_spec();
        let u = ControlSignal::constant(vec![0.0]);
        for t_end in [0.5, 2.0, 7.0] {
            let j = payoff(&spec, &[1.0], 0.0, &u, t_end).unwrap();
            assert!((j - (1.0 - (-t_end).exp())).abs() < 1e-10, "T = {t_end}");
        }
    }

    #[test]
    fn oscillatory_payoff_is_sin_tx_over_t() {
        let spec = oscillatory_spec();
        for (c, t_end) in [(0.8, 4.0), (-0.5, 9.0), (1.0, 16.0)] {
            let u = ControlSignal::constant(vec![c]);
            let j = payoff(&spec, &[0.0], 0.0, &u, t_end).unwrap();
            let x1 = c; // state after the control window
            let want = (t_end * x1).sin() / t_end;
            assert!((j - want).abs() < 1e-8, "c = {c}, T = {t_end}: {j} vs {want}");
            assert!(j.abs() <= 1.0 / t_end + 1e-8);
        }
    }

    #[test]
    fn oscillatory_gradient_is_one_at_origin() {
        let spec = oscillatory_spec();
        for t_end in [2.0, 5.0, 40.0] {
            let g = payoff_gradient(&spec, &[0.0], t_end).unwrap();
            assert!((g[0] - 1.0).abs() < 1e-9, "T = {t_end}: {}", g[0]);
        }
    }

    #[test]
    fn oscillatory_gradient_matches_cos_law() {
        let spec = oscillatory_spec();
        for &xi in &[0.1, 0.3, 0.7] {
            for &t_end in &[3.0, 5.0, 9.0] {
                let g = payoff_gradient(&spec, &[xi], t_end).unwrap();
                let want = (t_end * xi).cos();
                assert!(
                    (g[0] - want).abs() < 1e-6,
                    "xi = {xi}, T = {t_end}: {} vs {want}",
                    g[0]
                );
            }
        }
    }

    #[test]
    fn discounted_gradient_closed_form() {
        let spec = discounted_spec();
        for t_end in [1.0, 3.0, 8.0] {
            let g = payoff_gradient(&spec, &[1.0], t_end).unwrap();
            let want = 1.0 - (-t_end).exp();
            assert!((g[0] - want).abs() < 1e-10);
            let fd = finite_diff_gradient(&spec, &[1.0], t_end, 1e-4).unwrap();
            assert!((fd[0] - want).abs() < 1e-7);
        }
    }

    #[test]
    fn finite_diff_matches_variational_gradient_on_oscillatory() {
        let spec = oscillatory_spec();
        let g = payoff_gradient(&spec, &[0.3], 5.0).unwrap();
        let fd = finite_diff_gradient(&spec, &[0.3], 5.0, 1e-4).unwrap();
        let want = (5.0f64 * 0.3).cos();
        assert!((g[0] - want).abs() < 1e-8);
        assert!((g[0] - fd[0]).abs() / want.abs() < 1e-4);
    }

    #[test]
    fn zero_cost_gradient_is_zero() {
        let spec = spec_with(&["u1"], "0", 1, vec![0.0], ControlSignal::constant(vec![0.0]));
        let g = payoff_gradient(&spec, &[0.4], 6.0).unwrap();
        assert_eq!(g, vec![0.0]);
        let fd = finite_diff_gradient(&spec, &[0.4], 6.0, 1e-4).unwrap();
        assert_eq!(fd, vec![0.0]);
    }

    #[test]
    fn sweep_returns_all_checkpoints_in_one_pass() {
        let spec = discounted_spec();
        let horizons = [1.0, 2.0, 4.0, 8.0];
        let sweep = gradient_sweep(&spec, &[1.0], 0.0, &horizons).unwrap();
        assert_eq!(sweep.samples.len(), 4);
        assert!(sweep.truncated_at.is_none());
        for s in &sweep.samples {
            let want = 1.0 - (-s.horizon).exp();
            assert!((s.gradient[0] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn blowup_reports_divergence_time() {
        // dx/dt = x^2 from 1 blows up at t = 1.
        let mut spec =
            spec_with(&["x1*x1"], "0", 1, vec![1.0], ControlSignal::constant(vec![0.0]));
        spec.settings.blowup_norm = 1e9;
        let err = integrate_state(
            &spec,
            &[1.0],
            0.0,
            &ControlSignal::constant(vec![0.0]),
            2.0,
        )
        .unwrap_err();
        match err {
            IntegrationError::Diverged { t, .. } => {
                assert!((t - 1.0).abs() < 0.05, "blow-up time {t}")
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        // A sweep over the same span keeps the reachable checkpoints.
        let sweep = gradient_sweep(&spec, &[1.0], 0.0, &[0.5, 0.9, 1.5, 2.0]).unwrap();
        assert!(sweep.truncated_at.is_some());
        assert_eq!(sweep.samples.len(), 2);
    }

    #[test]
    fn invalid_horizon_rejected() {
        let spec = discounted_spec();
        let u = ControlSignal::constant(vec![0.0]);
        assert!(matches!(
            integrate_state(&spec, &[1.0], 2.0, &u, 1.0),
            Err(IntegrationError::InvalidHorizon { .. })
        ));
        assert!(matches!(
            integrate_state(&spec, &[1.0], -1.0, &u, 1.0),
            Err(IntegrationError::InvalidHorizon { .. })
        ));
    }

    #[test]
    fn costate_path_solves_adjoint_closed_form() {
        // Discounted problem: -dpsi/dt = -e^{-t} gives psi(t) = -e^{-t}
        // from psi(0) = -1.
        let spec = discounted_spec();
        let path = integrate_costate_path(&spec, &[-1.0], 1.0, 10.0, &[], None).unwrap();
        for (i, &t) in path.grid.iter().enumerate() {
            let want = -(-t).exp();
            assert!(
                (path.values[i][1] - want).abs() < 1e-10,
                "t = {t}: {} vs {want}",
                path.values[i][1]
            );
        }
    }

    #[test]
    fn dense_output_converges_at_fourth_order() {
        // Smooth problem with a breakpoint: order must survive the snap.
        let mut spec = spec_with(
            &["x1*ind(0,1) + 0.5*x1*ind(1,inf)"],
            "0",
            1,
            vec![1.0],
            ControlSignal::constant(vec![0.0]),
        );
        let exact = |t: f64| {
            if t <= 1.0 {
                t.exp()
            } else {
                1f64.exp() * (0.5 * (t - 1.0)).exp()
            }
        };
        let u = ControlSignal::constant(vec![0.0]);
        let mut errs = Vec::new();
        for step in [4e-2, 2e-2, 1e-2] {
            spec.settings.step = step;
            let traj = integrate_state(&spec, &[1.0], 0.0, &u, 2.0).unwrap();
            errs.push((traj.end_state()[0] - exact(2.0)).abs());
        }
        let order1 = (errs[0] / errs[1]).log2();
        let order2 = (errs[1] / errs[2]).log2();
        assert!(order1 > 3.7, "observed order {order1} (errors {errs:?})");
        assert!(order2 > 3.7, "observed order {order2} (errors {errs:?})");
    }

    #[test]
    fn step_halving_estimates_are_tiny_on_smooth_problems() {
        let mut spec =
            spec_with(&["x1"], "0", 1, vec![1.0], ControlSignal::constant(vec![0.0]));
        spec.settings.step = 1e-2;
        let u = ControlSignal::constant(vec![0.0]);
        let err = step_halving_error(&spec, &[1.0], 0.0, &u, 2.0).unwrap();
        assert!(err > 0.0 && err < 1e-8, "estimate {err:.3e}");
    }

    #[test]
    fn storage_thinning_keeps_breakpoints() {
        let mut spec = oscillatory_spec();
        spec.settings.max_stored = 50;
        let u = ControlSignal::constant(vec![0.5]);
        let traj = integrate_state(&spec, &[0.0], 0.0, &u, 5.0).unwrap();
        assert!(traj.grid().len() <= 120);
        for bp in [1.0, 2.0] {
            assert!(traj.grid().iter().any(|&t| t == bp), "missing breakpoint {bp}");
        }
        // Dense output still close to the exact solution x = 0.5*min(t,1).
        let x = traj.state_at(0.77)[0];
        assert!((x - 0.385).abs() < 1e-6);
    }
}
