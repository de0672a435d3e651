//! Deterministic generator of small smooth problems for oracle suites.
//!
//! Problems have polynomial/trigonometric dynamics and running costs with
//! mild coefficients, so trajectories stay tame on the horizons the suites
//! use and finite differences are trustworthy there. The same `(seed, index)`
//! always yields the same problem; there is no global randomness.

use crate::expr::parse_expr;
use crate::problem::{
    ControlBox, ControlSignal, InitialSet, NumericSettings, ProblemSpec,
};

/// SplitMix64: tiny deterministic PRNG, good enough for test-problem
/// synthesis and free of external dependencies.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Magnitude in [lo_abs, hi_abs] with random sign.
    fn coeff(&mut self, lo_abs: f64, hi_abs: f64) -> f64 {
        let sign = if self.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        sign * self.range(lo_abs, hi_abs)
    }
}

fn fmt_coeff(c: f64) -> String {
    format!("{c:.4}")
}

/// One additive term over states, time, and control.
fn dynamics_term(rng: &mut SplitMix64, m: usize) -> String {
    let j = rng.below(m) + 1;
    let c = fmt_coeff(rng.coeff(0.05, 0.35));
    match rng.below(6) {
        0 => format!("{c}*sin(x{j})"),
        1 => format!("{c}*cos(x{j})"),
        2 => format!("{c}*x{j}"),
        3 => format!("{c}*sin(t)"),
        4 => format!("{c}*u1"),
        _ => c,
    }
}

fn cost_term(rng: &mut SplitMix64, m: usize) -> String {
    let j = rng.below(m) + 1;
    let c = fmt_coeff(rng.coeff(0.05, 0.4));
    match rng.below(4) {
        0 => format!("{c}*sin(x{j})"),
        1 => format!("{c}*cos(x{j})"),
        2 => format!("{c}*x{j}"),
        _ => format!("{c}*sin(t)*x{j}"),
    }
}

/// Deterministic smooth problem number `index` for `seed`: one to three
/// states, one control, trigonometric/affine data, candidate control inside
/// the unit box.
pub fn random_smooth_problem(seed: u64, index: usize) -> ProblemSpec {
    let mut rng = SplitMix64::new(seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let m = 1 + rng.below(3);

    let mut dynamics = Vec::with_capacity(m);
    for _ in 0..m {
        let terms = 2 + rng.below(2);
        let body = (0..terms)
            .map(|_| dynamics_term(&mut rng, m))
            .collect::<Vec<_>>()
            .join(" + ");
        dynamics.push(parse_expr(&body, m, 1).expect("generated dynamics must parse"));
    }

    // Always give the cost a solid affine state term so gradients have
    // magnitude and relative comparisons are meaningful.
    let anchor_j = rng.below(m) + 1;
    let anchor = format!("{}*x{anchor_j}", fmt_coeff(rng.coeff(0.15, 0.5)));
    let extra = (0..1 + rng.below(2))
        .map(|_| cost_term(&mut rng, m))
        .collect::<Vec<_>>()
        .join(" + ");
    let running_cost = parse_expr(&format!("{anchor} + {extra}"), m, 1)
        .expect("generated cost must parse");

    let candidate_control = if rng.below(2) == 0 {
        let a = fmt_coeff(rng.coeff(0.1, 0.7));
        let b = rng.range(0.3, 2.0);
        ControlSignal::ExprOfT(vec![
            parse_expr(&format!("{a}*sin({b:.4}*t)"), m, 1).unwrap(),
        ])
    } else {
        let t_switch = rng.range(0.5, 3.0);
        ControlSignal::PiecewiseConstant(vec![
            (0.0, vec![rng.range(-0.8, 0.8)]),
            (t_switch, vec![rng.range(-0.8, 0.8)]),
        ])
    };

    let candidate_x0: Vec<f64> = (0..m).map(|_| rng.range(-0.8, 0.8)).collect();

    let mut settings = NumericSettings::default();
    settings.grid = crate::problem::HorizonGrid::new(1.0, 1.5, 6);
    settings.check_horizon = 5.0;

    let spec = ProblemSpec {
        state_dim: m,
        control_dim: 1,
        dynamics,
        running_cost,
        salvage: parse_expr("0", m, 1).unwrap(),
        control_box: ControlBox { lo: vec![-1.0], hi: vec![1.0] },
        initial_set: InitialSet::Free,
        candidate_control,
        candidate_x0,
        lambda: 1.0,
        settings,
    };
    spec.validate().expect("generated problem must validate");
    spec
}

/// Deterministic co-state seed vector with entries in [-1, 1].
pub fn random_psi0(seed: u64, index: usize, m: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed ^ 0xabcdef ^ (index as u64) << 17);
    (0..m).map(|_| rng.range(-1.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = random_smooth_problem(42, 3);
        let b = random_smooth_problem(42, 3);
        assert_eq!(a.state_dim, b.state_dim);
        assert_eq!(
            a.running_cost.to_string(),
            b.running_cost.to_string()
        );
        assert_eq!(a.candidate_x0, b.candidate_x0);
    }

    #[test]
    fn generated_problems_validate_and_vary() {
        let mut dims = [0usize; 4];
        for i in 0..20 {
            let spec = random_smooth_problem(7, i);
            spec.validate().unwrap();
            dims[spec.state_dim] += 1;
        }
        assert!(dims[1] > 0 && (dims[2] > 0 || dims[3] > 0));
    }
}
