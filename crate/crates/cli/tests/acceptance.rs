//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line (run with `cargo test --test acceptance -- --nocapture`
//! to see them). Criteria run against the shipped problem files under
//! `problems/`, not inline constants, at the tolerances fixed here.

use horizon_pmp::costate::{detect_limit, gradient_curve, LimitTolerances};
use horizon_pmp::engine::{integrate_costate_path, variational_probe};
use horizon_pmp::problem::{ControlSignal, HorizonGrid};
use horizon_pmp::synth::{random_psi0, random_smooth_problem};
use horizon_pmp::verifier::{hamiltonian, run_full_check, Psi0Source};
use horizon_pmp::{finite_diff_gradient, payoff, payoff_gradient, ProblemSpec};
use horizon_pmp_cli::problem_file::load_problem;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

fn problem_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../problems").join(name)
}

fn oscillatory() -> ProblemSpec {
    load_problem(&problem_path("paper-oscillatory.problem")).unwrap()
}

fn discounted() -> ProblemSpec {
    load_problem(&problem_path("discounted-linear.problem")).unwrap()
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_horizon-pmp"))
}

fn passed(n: u32, what: &str) {
    println!("acceptance criterion {n}: PASS — {what}");
}

#[test]
fn criterion_1_oscillatory_pointwise_gradient() {
    let started = Instant::now();
    let spec = oscillatory();
    let grid = HorizonGrid::new(2.0, 1.5, 10);
    let curve = gradient_curve(&spec, &[0.0], &grid).unwrap();
    assert_eq!(curve.samples.len(), 10);
    for s in &curve.samples {
        assert!(
            (s.gradient[0] - 1.0).abs() <= 1e-6,
            "T = {}: gradient {}",
            s.horizon,
            s.gradient[0]
        );
    }
    let verdict = detect_limit(&curve, LimitTolerances::default());
    let v = verdict.converged_value().expect("tail must converge");
    assert!((v[0] - 1.0).abs() <= 1e-6, "limit {}", v[0]);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "took {elapsed:.2} s, budget 5 s");
    passed(1, "pointwise gradient curve is 1.0 within 1e-6 and converges");
}

#[test]
fn criterion_2_oscillatory_gradient_law() {
    let started = Instant::now();
    let spec = oscillatory();
    for &xi in &[0.1, 0.3, 0.7] {
        for &t_end in &[3.0, 5.0, 9.0] {
            let g = payoff_gradient(&spec, &[xi], t_end).unwrap();
            let want = (t_end * xi).cos();
            assert!(
                (g[0] - want).abs() <= 1e-4,
                "xi = {xi}, T = {t_end}: {} vs {want}",
                g[0]
            );
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "took {elapsed:.2} s, budget 10 s");
    passed(2, "payoff gradient matches cos(T xi) within 1e-4 on the 3x3 grid");
}

#[test]
fn criterion_3_oscillatory_payoff_bound() {
    let started = Instant::now();
    let spec = oscillatory();
    let controls = [
        ControlSignal::constant(vec![1.0]),
        ControlSignal::constant(vec![-0.6]),
        ControlSignal::PiecewiseConstant(vec![(0.0, vec![0.25]), (0.5, vec![-1.0])]),
        ControlSignal::PiecewiseConstant(vec![
            (0.0, vec![-1.0]),
            (0.3, vec![1.0]),
            (0.8, vec![0.5]),
        ]),
        ControlSignal::PiecewiseConstant(vec![(0.0, vec![0.0]), (2.0, vec![1.0])]),
    ];
    for (i, u) in controls.iter().enumerate() {
        spec.validate_signal(u).unwrap();
        for &t_end in &[4.0, 8.0, 16.0, 32.0] {
            let j = payoff(&spec, &[0.0], 0.0, u, t_end).unwrap();
            assert!(
                j.abs() <= 1.0 / t_end + 1e-6,
                "control {i}, T = {t_end}: |J| = {} > 1/T = {}",
                j.abs(),
                1.0 / t_end
            );
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "took {elapsed:.2} s, budget 10 s");
    passed(3, "payoff bound |J| <= 1/T holds for 5 admissible controls");
}

#[test]
fn criterion_4_counterexample_semantics_via_cli() {
    let problem = problem_path("paper-oscillatory.problem");

    let out = binary()
        .args(["reconstruct", problem.to_str().unwrap(), "--format", "structured"])
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "reconstruct exit: {:?}", out.status.code());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let psi0 = v["psi0"][0].as_f64().expect("psi0 present");
    assert!((psi0 + 1.0).abs() <= 1e-6, "psi0 = {psi0}");
    let joint_kind = v["joint_limit"]["kind"].as_str().unwrap();
    assert_ne!(joint_kind, "converged", "joint probe must not converge");

    let out = binary()
        .args(["check", problem.to_str().unwrap(), "--format", "structured"])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(3), "check exit code");
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let violations = v["report"]["hamiltonian_max"]["violations"]
        .as_array()
        .expect("violations array");
    let hit = violations
        .iter()
        .filter_map(|w| {
            let t = w["t"].as_f64()?;
            let u = w["u"][0].as_f64()?;
            let gap = w["gap"].as_f64()?;
            Some((t, u, gap))
        })
        .find(|&(t, u, gap)| {
            t > 0.0 && t < 1.0 && u == -1.0 && (gap - 1.0).abs() <= 1e-6
        });
    assert!(hit.is_some(), "expected gap 1.0 at some t in (0,1), u = -1");
    passed(4, "reconstruct gives psi0 = -1 with failing joint probe; check exits 3 with unit gap");
}

#[test]
fn criterion_5_discounted_full_pass() {
    let started = Instant::now();
    let spec = discounted();
    let full = run_full_check(&spec, Psi0Source::Reconstruct).unwrap();

    assert!(
        (full.report.psi0[0] + 1.0).abs() <= 1e-5,
        "psi0 = {}",
        full.report.psi0[0]
    );
    for i in 0..=100 {
        let t = 10.0 * i as f64 / 100.0;
        let got = full.arc.psi_at(t)[0];
        let want = -(-t).exp();
        assert!((got - want).abs() <= 1e-5, "psi({t}) = {got}, want {want}");
    }
    assert!(full.report.adjoint.pass, "adjoint: {:?}", full.report.adjoint);
    assert!(full.report.hamiltonian_max.pass());
    assert!(full.report.tail_hamiltonian.pass());
    assert!(full.report.limiting_approach.pass);
    assert!(full.report.transversality.pass);
    assert!(full.report.verdict.all_pass());
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "took {elapsed:.2} s, budget 10 s");
    passed(5, "discounted arc is -e^{-t} within 1e-5 and every condition passes");
}

#[test]
fn criterion_6_gradient_oracle_equivalence() {
    let seed = 0xacce97;
    for i in 0..20 {
        let spec = random_smooth_problem(seed, i);
        let t_end = 3.0;
        let g = payoff_gradient(&spec, &spec.candidate_x0, t_end).unwrap();
        let fd = finite_diff_gradient(&spec, &spec.candidate_x0, t_end, 1e-4).unwrap();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = g
            .iter()
            .chain(&fd)
            .map(|v| v.abs())
            .fold(0.0f64, f64::max)
            .max(1e-3);
        assert!(
            diff / scale < 1e-4,
            "problem {i}: rel err {:.3e} (g = {g:?}, fd = {fd:?})",
            diff / scale
        );
    }
    passed(6, "variational gradient matches central differences on 20 problems");
}

#[test]
fn criterion_7_cauchy_formula_identity() {
    let seed = 0xacce98;
    let ts = [1.0, 2.0, 5.0];
    for i in 0..20 {
        let spec = random_smooth_problem(seed, i);
        let m = spec.state_dim;
        let psi0 = random_psi0(seed, i, m);
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let path =
                integrate_costate_path(&spec, &psi0, lambda, 5.0, &ts, None).unwrap();
            for &t in &ts {
                let probe = variational_probe(&spec, &spec.candidate_x0, t).unwrap();
                let row = path.value_at(t);
                let psi_t = &row[m..2 * m];
                for j in 0..m {
                    let mut lhs = 0.0;
                    for l in 0..m {
                        lhs += psi_t[l] * probe.matrix[(l, j)];
                    }
                    let rhs = psi0[j] + lambda * probe.gradient[j];
                    assert!(
                        (lhs - rhs).abs() < 1e-6,
                        "problem {i}, lambda {lambda}, t {t}, j {j}: {lhs} vs {rhs}"
                    );
                }
            }
        }
    }
    passed(7, "Cauchy identity holds within 1e-6 across problems, times, multipliers");
}

#[test]
fn criterion_8_property_suite() {
    // Hamiltonian linearity in (psi, lambda).
    let seed = 0xacce99;
    for i in 0..10 {
        let spec = random_smooth_problem(seed, i);
        let m = spec.state_dim;
        let x: Vec<f64> = (0..m).map(|j| 0.2 * j as f64 - 0.1).collect();
        let psi = random_psi0(seed, i, m);
        let u = vec![0.4];
        for c in [0.25, 2.0, -3.0] {
            let h1 = hamiltonian(&spec, &x, &psi, &u, 0.8, 1.3).unwrap();
            let psi_c: Vec<f64> = psi.iter().map(|p| c * p).collect();
            let h2 = hamiltonian(&spec, &x, &psi_c, &u, c * 0.8, 1.3).unwrap();
            assert!(
                (h2 - c * h1).abs() <= 1e-12 * (1.0 + (c * h1).abs()),
                "problem {i}, c {c}"
            );
        }
    }

    // Argmax invariance under positive scaling of (psi, lambda).
    let spec = discounted();
    let u_grid = spec.control_box.sample_grid(33);
    for i in 0..6 {
        let psi = random_psi0(seed ^ 1, i, 1);
        let (x, t, lambda) = ([0.7], 0.9, 1.0);
        let argmax = |p: &[f64], l: f64| -> Vec<usize> {
            let values: Vec<f64> = u_grid
                .iter()
                .map(|u| hamiltonian(&spec, &x, p, u, l, t).unwrap())
                .collect();
            let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            values
                .iter()
                .enumerate()
                .filter(|(_, &v)| (best - v) <= 1e-12 * (1.0 + best.abs()))
                .map(|(k, _)| k)
                .collect()
        };
        let base = argmax(&psi, lambda);
        for c in [0.5, 3.0, 10.0] {
            let scaled: Vec<f64> = psi.iter().map(|p| c * p).collect();
            assert_eq!(base, argmax(&scaled, c * lambda), "scaling c = {c}");
        }
    }

    // Fundamental determinant positivity.
    for i in 0..8 {
        let spec = random_smooth_problem(seed ^ 2, i);
        let fund =
            horizon_pmp::integrate_fundamental(&spec, &spec.candidate_x0, 5.0).unwrap();
        assert!(fund.determinants().iter().all(|&d| d > 0.0), "problem {i}");
    }

    // Flow consistency of the payoff along the candidate control.
    for i in 0..8 {
        let spec = random_smooth_problem(seed ^ 3, i);
        let xi = spec.candidate_x0.clone();
        let (t, t_end) = (1.5, 4.0);
        let j_t = payoff(&spec, &xi, 0.0, &spec.candidate_control, t).unwrap();
        let j_end = payoff(&spec, &xi, 0.0, &spec.candidate_control, t_end).unwrap();
        let y_t = horizon_pmp::integrate_state(&spec, &xi, 0.0, &spec.candidate_control, t)
            .unwrap()
            .end_state()
            .to_vec();
        let rest = payoff(&spec, &y_t, t, &spec.candidate_control, t_end).unwrap();
        assert!((j_end - j_t - rest).abs() < 1e-8, "problem {i}");
    }

    // Identical inputs produce byte-identical structured reports.
    let spec = discounted();
    let a = run_full_check(&spec, Psi0Source::Reconstruct).unwrap();
    let b = run_full_check(&spec, Psi0Source::Reconstruct).unwrap();
    let ja = serde_json::to_vec_pretty(&a.report).unwrap();
    let jb = serde_json::to_vec_pretty(&b.report).unwrap();
    assert_eq!(ja, jb, "structured reports must be byte-identical");

    passed(
        8,
        "linearity, argmax scaling invariance, det positivity, flow consistency, determinism",
    );
}
