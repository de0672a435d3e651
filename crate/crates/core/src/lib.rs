//! Numerical reconstruction and verification of Pontryagin-maximum-principle
//! necessary conditions for infinite-horizon optimal control problems.
//!
//! Given a problem (dynamics `f`, running cost `f0`, salvage `l`, control box
//! `U`, initial set `C`) and a candidate process, the library:
//!
//! * samples the finite-horizon payoff gradient `T -> dJ/dx(xi; T)` on
//!   geometric horizon grids and classifies its tail (converged, oscillating,
//!   diverging);
//! * reconstructs the co-state arc from the tail limit (`psi(0) = -lim`,
//!   multiplier 1) and by the Cauchy formula through the fundamental matrix;
//! * probes the joint limit in `(xi, T)`, whose failure signals that the
//!   reconstructed arc need not be the unique or Hamiltonian-maximal one;
//! * verifies the full necessary-condition system: adjoint equation residual,
//!   Hamiltonian maximum over the control box, the tail Hamiltonian
//!   comparison built from finite-horizon gradients, the limiting-approach
//!   property of the initial co-state, transversality at the initial set, and
//!   overtaking comparisons against challenger processes.

pub mod costate;
pub mod engine;
pub mod expr;
pub mod problem;
pub mod synth;
pub mod verifier;

pub use costate::{
    classify_tail, costate_by_cauchy, detect_limit, gradient_curve, gradient_curve_from,
    joint_limit_probe, joint_limit_probe_with, payoff_difference_limit, reconstruct_costate0,
    ArcProvenance, CauchyCostate, CostateArc, GradientCurve, JointProbe, LimitKind,
    LimitTolerances, LimitVerdict, Reconstruction,
};
pub use engine::{
    finite_diff_gradient, integrate_fundamental, integrate_state, payoff, payoff_gradient,
    payoff_gradient_from, payoff_sweep, FundamentalTrajectory, IntegrationError, Trajectory,
};
pub use expr::{diff_expr, parse_expr, Expr, ParseError, Var};
pub use problem::{
    Breakpoints, ControlBox, ControlSignal, HorizonGrid, InitialSet, NumericSettings,
    ProblemError, ProblemSpec,
};
pub use verifier::{
    check_adjoint, check_exact_limiting, check_gradient_hamiltonian, check_max_condition,
    check_transversality0, default_t_grid, hamiltonian, overtaking_compare, run_full_check,
    CheckError, FullCheck, PmpReport, Psi0Source, Verdict,
};
