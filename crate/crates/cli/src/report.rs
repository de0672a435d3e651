//! Report rendering and CSV sidecars.
//!
//! Structured output is JSON holding the full verdict tree plus a settings
//! echo; identical inputs render byte-identical structured reports (wall
//! time goes only to the text summary). CSV values carry 17 significant
//! digits so the sampled curves round-trip losslessly.

use anyhow::{Context, Result};
use horizon_pmp::costate::{GradientCurve, JointProbe, LimitVerdict};
use horizon_pmp::verifier::{OvertakingCheck, PmpReport};
use horizon_pmp::CostateArc;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

pub const TOOL: &str = "horizon-pmp";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Structured,
}

/// Serialize a number with 17 significant digits (round-trip exact for f64).
pub fn csv_num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(dir: &Path, name: &str, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create csv directory {}", dir.display()))?;
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|&v| csv_num(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn dump_gradient_curve(dir: &Path, name: &str, curve: &GradientCurve) -> Result<()> {
    let m = curve.xi.len();
    let mut header = String::from("T");
    for j in 1..=m {
        write!(header, ",g{j}").unwrap();
    }
    header.push_str(",payoff");
    let rows: Vec<Vec<f64>> = curve
        .samples
        .iter()
        .map(|s| {
            let mut row = vec![s.horizon];
            row.extend(&s.gradient);
            row.push(s.payoff);
            row
        })
        .collect();
    write_csv(dir, name, &header, &rows)
}

pub fn dump_probe_shells(dir: &Path, probe: &JointProbe) -> Result<()> {
    let m = probe
        .shells
        .first()
        .map(|s| s.curve.xi.len())
        .unwrap_or(0);
    let mut header = String::from("shell,radius,T");
    for j in 1..=m {
        write!(header, ",g{j}").unwrap();
    }
    let mut rows = Vec::new();
    for (i, shell) in probe.shells.iter().enumerate() {
        for s in &shell.curve.samples {
            let mut row = vec![i as f64, shell.radius, s.horizon];
            row.extend(&s.gradient);
            rows.push(row);
        }
    }
    write_csv(dir, "probe_shells.csv", &header, &rows)
}

pub fn dump_costate_arc(dir: &Path, arc: &CostateArc) -> Result<()> {
    let m = arc.psi0.len();
    let mut header = String::from("t");
    for j in 1..=m {
        write!(header, ",x{j}").unwrap();
    }
    for j in 1..=m {
        write!(header, ",psi{j}").unwrap();
    }
    let mut rows = Vec::with_capacity(arc.len());
    for i in 0..arc.len() {
        let (t, x, psi) = arc.sample(i);
        let mut row = vec![t];
        row.extend_from_slice(x);
        row.extend_from_slice(psi);
        rows.push(row);
    }
    write_csv(dir, "costate_arc.csv", &header, &rows)
}

pub fn dump_difference_curve(dir: &Path, check: &OvertakingCheck) -> Result<()> {
    let rows: Vec<Vec<f64>> = check
        .curve
        .iter()
        .zip(&check.tail_infimum)
        .map(|(&(t, d), &inf)| vec![t, d, inf])
        .collect();
    write_csv(dir, "payoff_difference.csv", "T,d,tail_infimum", &rows)
}

pub fn print_structured<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn vec_fmt(v: &[f64]) -> String {
    let inner: Vec<String> = v.iter().map(|x| format!("{x:.9}")).collect();
    format!("[{}]", inner.join(", "))
}

pub fn verdict_line(v: &LimitVerdict) -> String {
    v.describe()
}

/// Human-readable rendering of a full check report.
pub fn render_report_text(report: &PmpReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "multiplier lambda = {}", report.lambda);
    let _ = writeln!(
        s,
        "psi(0) = {} ({:?})",
        vec_fmt(&report.psi0),
        report.psi0_provenance
    );
    let _ = writeln!(s, "pointwise gradient limit: {}", verdict_line(&report.pointwise_limit));
    let _ = writeln!(s, "joint gradient limit:     {}", verdict_line(&report.joint_limit));
    if let Some(w) = &report.joint_limit_warning {
        let _ = writeln!(s, "warning: {w}");
    }
    let _ = writeln!(
        s,
        "gradient sup-norm over probes: {:.6e}",
        report.gradient_sup_norm
    );
    let a = &report.adjoint;
    let _ = writeln!(
        s,
        "adjoint residual: {:.3e} (tol {:.1e}) {}",
        a.residual,
        a.tol,
        pass_str(a.pass)
    );
    let h = &report.hamiltonian_max;
    if h.violations.is_empty() {
        let _ = writeln!(
            s,
            "hamiltonian max: pass (worst gap {:.3e} over {} times x {} controls, tol {:.1e})",
            h.worst_gap, h.t_checked, h.u_checked, h.tol
        );
    } else {
        let worst = h
            .violations
            .iter()
            .max_by(|x, y| x.gap.total_cmp(&y.gap))
            .unwrap();
        let _ = writeln!(
            s,
            "hamiltonian max: FAIL — {} violation(s); worst gap {:.6} at t = {}, u = {}",
            h.violations.len(),
            worst.gap,
            worst.t,
            vec_fmt(&worst.u)
        );
    }
    let g = &report.tail_hamiltonian;
    if g.violations.is_empty() {
        let _ = writeln!(
            s,
            "tail hamiltonian comparison: pass ({} estimates, tol {:.1e})",
            g.estimates.len(),
            g.tol
        );
    } else {
        let worst = g
            .violations
            .iter()
            .min_by(|x, y| x.estimate.total_cmp(&y.estimate))
            .unwrap();
        let _ = writeln!(
            s,
            "tail hamiltonian comparison: FAIL — {} violation(s); worst estimate {:.6} at t = {}, u = {} (horizon {})",
            g.violations.len(),
            worst.estimate,
            worst.t,
            vec_fmt(&worst.u),
            worst.witness_horizon
        );
    }
    let w = &report.limiting_approach;
    let _ = writeln!(
        s,
        "limiting approach: {} (best distance {:.3e}, payoff gap {:.3e} on {} at T = {})",
        pass_str(w.pass),
        w.best_distance,
        w.best_payoff_gap,
        w.best_sequence,
        w.best_horizon
    );
    let t = &report.transversality;
    let _ = writeln!(
        s,
        "transversality ({}): {} (residual {:.3e}, tol {:.1e})",
        t.mode,
        pass_str(t.pass),
        t.residual,
        t.tol
    );
    match &report.verdict {
        horizon_pmp::Verdict::AllPass => {
            let _ = writeln!(s, "verdict: ALL PASS");
        }
        horizon_pmp::Verdict::Violations(v) => {
            let _ = writeln!(s, "verdict: VIOLATIONS ({})", v.join(", "));
        }
    }
    s
}

fn pass_str(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}
