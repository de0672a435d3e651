//! Command-line front end: reconstruct co-state arcs, check the full
//! necessary-condition system, compare challengers, and cross-check the
//! variational gradient.
//!
//! Exit codes: 0 pass, 1 input error, 2 numeric non-convergence,
//! 3 condition violation.

use anyhow::Result;
use horizon_pmp_cli::{problem_file, report};
use clap::{Args, Parser, Subcommand};
use horizon_pmp::costate::{
    detect_limit, gradient_curve, joint_limit_probe_with, ArcProvenance, CostateArc,
    LimitTolerances,
};
use horizon_pmp::verifier::{overtaking_compare, run_full_check, CheckError, Psi0Source};
use horizon_pmp::{finite_diff_gradient, payoff_gradient, IntegrationError, ProblemSpec};
use problem_file::{grid_of, load_challenger, load_problem};
use report::{Format, TOOL, VERSION};
use serde::Serialize;
use std::path::PathBuf;
use std::time::Instant;

const EXIT_PASS: i32 = 0;
const EXIT_INPUT: i32 = 1;
const EXIT_NUMERIC: i32 = 2;
const EXIT_VIOLATION: i32 = 3;

#[derive(Parser)]
#[command(
    name = "horizon-pmp",
    version,
    about = "Reconstruct co-state arcs and verify maximum-principle conditions \
             for infinite-horizon optimal control problems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct psi(0) from the tail of the payoff-gradient curve and
    /// probe the joint limit.
    Reconstruct {
        problem: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Run every necessary-condition check against the candidate process.
    Check {
        problem: PathBuf,
        /// Audit this initial co-state instead of reconstructing one
        /// (comma-separated components).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        psi0: Option<Vec<f64>>,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Compare a challenger process against the candidate in the
    /// overtaking sense.
    Compare {
        problem: PathBuf,
        challenger: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Cross-check the variational payoff gradient against central
    /// differences.
    Gradcheck {
        problem: PathBuf,
        /// Base point (comma-separated); defaults to the candidate initial
        /// state.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        xi: Option<Vec<f64>>,
        /// Horizon T.
        #[arg(long, default_value_t = 5.0)]
        horizon: f64,
        /// Central-difference step.
        #[arg(long)]
        fd_step: Option<f64>,
        #[command(flatten)]
        opts: CommonOpts,
    },
}

#[derive(Args)]
struct CommonOpts {
    /// Integrator base step.
    #[arg(long)]
    step: Option<f64>,
    /// First horizon of the geometric grid.
    #[arg(long)]
    t0: Option<f64>,
    /// Ratio of the geometric horizon grid.
    #[arg(long)]
    ratio: Option<f64>,
    /// Number of horizons in the grid.
    #[arg(long)]
    samples: Option<usize>,
    /// Absolute tolerance for limit detection.
    #[arg(long)]
    tol_abs: Option<f64>,
    /// Relative tolerance for limit detection.
    #[arg(long)]
    tol_rel: Option<f64>,
    /// Tail window length.
    #[arg(long)]
    window: Option<usize>,
    /// Initial shell radius of the joint-limit probe.
    #[arg(long)]
    radius: Option<f64>,
    /// Lattice points per control axis.
    #[arg(long, value_name = "POINTS")]
    u_grid: Option<usize>,
    /// Number of time samples for pointwise checks.
    #[arg(long, value_name = "POINTS")]
    t_grid: Option<usize>,
    /// Multiplier on the running cost in the Hamiltonian.
    #[arg(long)]
    lambda: Option<f64>,
    /// Write CSV sidecars (curves, arcs) into this directory.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

impl CommonOpts {
    fn apply(&self, spec: &mut ProblemSpec) {
        let s = &mut spec.settings;
        if let Some(v) = self.step {
            s.step = v;
        }
        if let Some(v) = self.t0 {
            s.grid.t0 = v;
        }
        if let Some(v) = self.ratio {
            s.grid.ratio = v;
        }
        if let Some(v) = self.samples {
            s.grid.count = v;
        }
        if let Some(v) = self.tol_abs {
            s.tol_abs = v;
            s.limit_tol = s.limit_tol.max(v);
        }
        if let Some(v) = self.tol_rel {
            s.tol_rel = v;
        }
        if let Some(v) = self.window {
            s.window = v;
        }
        if let Some(v) = self.radius {
            s.radius = v;
        }
        if let Some(v) = self.u_grid {
            s.u_lattice = v;
        }
        if let Some(v) = self.t_grid {
            s.t_samples = v;
        }
        if let Some(v) = self.lambda {
            spec.lambda = v;
        }
    }
}

fn main() {
    init_thread_pool();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INPUT
        }
    };
    std::process::exit(code);
}

/// `HORIZON_PMP_THREADS` caps internal parallelism.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("HORIZON_PMP_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn numeric_exit(e: &IntegrationError) -> i32 {
    eprintln!("numeric failure: {e}");
    EXIT_NUMERIC
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Reconstruct { problem, opts } => cmd_reconstruct(&problem, &opts),
        Command::Check { problem, psi0, opts } => cmd_check(&problem, psi0, &opts),
        Command::Compare { problem, challenger, opts } => {
            cmd_compare(&problem, &challenger, &opts)
        }
        Command::Gradcheck { problem, xi, horizon, fd_step, opts } => {
            cmd_gradcheck(&problem, xi, horizon, fd_step, &opts)
        }
    }
}

#[derive(Serialize)]
struct ReconstructOutput<'a> {
    tool: &'static str,
    version: &'static str,
    problem: String,
    probe_sequence: &'static str,
    settings: &'a horizon_pmp::NumericSettings,
    pointwise_limit: &'a horizon_pmp::LimitVerdict,
    joint_limit: &'a horizon_pmp::LimitVerdict,
    gradient_sup_norm: f64,
    psi0: Option<Vec<f64>>,
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<String>,
}

fn cmd_reconstruct(path: &std::path::Path, opts: &CommonOpts) -> Result<i32> {
    let started = Instant::now();
    let mut spec = load_problem(path)?;
    opts.apply(&mut spec);
    spec.validate()?;
    let grid = grid_of(&spec);
    let tols = LimitTolerances::from(&spec.settings);

    let curve = match gradient_curve(&spec, &spec.candidate_x0, &grid) {
        Ok(c) => c,
        Err(e) => return Ok(numeric_exit(&e)),
    };
    let verdict = detect_limit(&curve, tols);
    let probe = match joint_limit_probe_with(
        &spec,
        spec.settings.radius,
        spec.settings.shells,
        &grid,
        tols,
        &curve,
    ) {
        Ok(p) => p,
        Err(e) => return Ok(numeric_exit(&e)),
    };

    let (psi0, lambda, arc) = match verdict.converged_value() {
        Some(g) => {
            let psi0: Vec<f64> = g.iter().map(|v| -v).collect();
            let arc = match CostateArc::integrate(
                &spec,
                &psi0,
                1.0,
                grid.max_time(),
                &[],
                ArcProvenance::Reconstructed,
            ) {
                Ok(a) => a,
                Err(e) => return Ok(numeric_exit(&e)),
            };
            (Some(psi0), Some(1.0), Some(arc))
        }
        None => (None, None, None),
    };

    let warning = if verdict.is_converged() && !probe.verdict.is_converged() {
        Some(
            "joint gradient limit did not converge: the reconstructed co-state need not \
             be the unique candidate and the Hamiltonian maximum condition is not \
             guaranteed a priori"
                .to_string(),
        )
    } else {
        None
    };

    if let Some(dir) = &opts.csv_dir {
        report::dump_gradient_curve(dir, "gradient_curve.csv", &curve)?;
        report::dump_probe_shells(dir, &probe)?;
        if let Some(arc) = &arc {
            report::dump_costate_arc(dir, arc)?;
        }
    }

    match opts.format {
        Format::Structured => {
            report::print_structured(&ReconstructOutput {
                tool: TOOL,
                version: VERSION,
                problem: path.display().to_string(),
                probe_sequence: horizon_pmp::costate::PROBE_SEQUENCE_NOTE,
                settings: &spec.settings,
                pointwise_limit: &verdict,
                joint_limit: &probe.verdict,
                gradient_sup_norm: probe.gradient_sup_norm,
                psi0: psi0.clone(),
                lambda,
                warning: warning.clone(),
            })?;
        }
        Format::Text => {
            println!("{TOOL} {VERSION} reconstruct — {}", path.display());
            println!("pointwise gradient limit: {}", verdict.describe());
            println!("joint gradient limit:     {}", probe.verdict.describe());
            println!("gradient sup-norm over probes: {:.6e}", probe.gradient_sup_norm);
            match (&psi0, lambda) {
                (Some(p), Some(l)) => {
                    let comps: Vec<String> = p.iter().map(|v| format!("{v:.9}")).collect();
                    println!("psi(0) = [{}], lambda = {l}", comps.join(", "));
                }
                _ => println!("psi(0) not determined: pointwise limit did not converge"),
            }
            if let Some(w) = &warning {
                println!("warning: {w}");
            }
            println!("wall time: {:.3} s", started.elapsed().as_secs_f64());
        }
    }
    Ok(if verdict.is_converged() { EXIT_PASS } else { EXIT_NUMERIC })
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    tool: &'static str,
    version: &'static str,
    problem: String,
    report: &'a horizon_pmp::PmpReport,
}

fn cmd_check(path: &std::path::Path, psi0: Option<Vec<f64>>, opts: &CommonOpts) -> Result<i32> {
    let started = Instant::now();
    let mut spec = load_problem(path)?;
    opts.apply(&mut spec);
    spec.validate()?;

    let source = match psi0 {
        Some(v) => {
            if v.len() != spec.state_dim {
                anyhow::bail!(
                    "--psi0 needs {} components, got {}",
                    spec.state_dim,
                    v.len()
                );
            }
            Psi0Source::Supplied(v)
        }
        None => Psi0Source::Reconstruct,
    };

    let full = match run_full_check(&spec, source) {
        Ok(f) => f,
        Err(CheckError::Problem(e)) => return Err(e.into()),
        Err(CheckError::Integration(e)) => return Ok(numeric_exit(&e)),
        Err(CheckError::NotConverged(v)) => {
            eprintln!(
                "co-state reconstruction did not converge: {} (supply --psi0 to audit an arc)",
                v.describe()
            );
            return Ok(EXIT_NUMERIC);
        }
    };

    if let Some(dir) = &opts.csv_dir {
        report::dump_gradient_curve(dir, "gradient_curve.csv", &full.pointwise_curve)?;
        report::dump_probe_shells(dir, &full.probe)?;
        report::dump_costate_arc(dir, &full.arc)?;
    }

    match opts.format {
        Format::Structured => report::print_structured(&CheckOutput {
            tool: TOOL,
            version: VERSION,
            problem: path.display().to_string(),
            report: &full.report,
        })?,
        Format::Text => {
            println!("{TOOL} {VERSION} check — {}", path.display());
            print!("{}", report::render_report_text(&full.report));
            println!("wall time: {:.3} s", started.elapsed().as_secs_f64());
        }
    }
    Ok(if full.report.verdict.all_pass() { EXIT_PASS } else { EXIT_VIOLATION })
}

#[derive(Serialize)]
struct CompareOutput<'a> {
    tool: &'static str,
    version: &'static str,
    problem: String,
    challenger: String,
    overtaking: &'a horizon_pmp::verifier::OvertakingCheck,
}

fn cmd_compare(
    path: &std::path::Path,
    challenger_path: &std::path::Path,
    opts: &CommonOpts,
) -> Result<i32> {
    let started = Instant::now();
    let mut spec = load_problem(path)?;
    opts.apply(&mut spec);
    spec.validate()?;
    let (x0, control) = load_challenger(challenger_path, &spec)?;

    let check = match overtaking_compare(&spec, &x0, &control, &grid_of(&spec)) {
        Ok(c) => c,
        Err(CheckError::Problem(e)) => return Err(e.into()),
        Err(CheckError::Integration(e)) => return Ok(numeric_exit(&e)),
        Err(CheckError::NotConverged(_)) => unreachable!("compare does not reconstruct"),
    };

    if let Some(dir) = &opts.csv_dir {
        report::dump_difference_curve(dir, &check)?;
    }

    match opts.format {
        Format::Structured => report::print_structured(&CompareOutput {
            tool: TOOL,
            version: VERSION,
            problem: path.display().to_string(),
            challenger: challenger_path.display().to_string(),
            overtaking: &check,
        })?,
        Format::Text => {
            println!(
                "{TOOL} {VERSION} compare — {} vs {}",
                path.display(),
                challenger_path.display()
            );
            println!(
                "tail infimum estimate: {:.6e} (tol {:.1e}, window of {})",
                check.estimate,
                check.tol,
                spec.settings.window
            );
            println!(
                "challenger advantage at last horizon: {:.6e}",
                check.curve.last().map(|&(_, d)| d).unwrap_or(0.0)
            );
            println!(
                "verdict: {}",
                if check.consistent {
                    "consistent with overtaking optimality of the candidate"
                } else {
                    "candidate is beaten beyond tolerance"
                }
            );
            println!("wall time: {:.3} s", started.elapsed().as_secs_f64());
        }
    }
    Ok(if check.consistent { EXIT_PASS } else { EXIT_VIOLATION })
}

#[derive(Serialize)]
struct GradcheckOutput {
    tool: &'static str,
    version: &'static str,
    problem: String,
    xi: Vec<f64>,
    horizon: f64,
    fd_step: f64,
    variational: Vec<f64>,
    central_difference: Vec<f64>,
    relative_error: f64,
}

fn cmd_gradcheck(
    path: &std::path::Path,
    xi: Option<Vec<f64>>,
    horizon: f64,
    fd_step: Option<f64>,
    opts: &CommonOpts,
) -> Result<i32> {
    let mut spec = load_problem(path)?;
    opts.apply(&mut spec);
    spec.validate()?;
    let xi = xi.unwrap_or_else(|| spec.candidate_x0.clone());
    if xi.len() != spec.state_dim {
        anyhow::bail!("--xi needs {} components, got {}", spec.state_dim, xi.len());
    }
    let h = fd_step.unwrap_or(spec.settings.fd_step);

    let g = match payoff_gradient(&spec, &xi, horizon) {
        Ok(g) => g,
        Err(e) => return Ok(numeric_exit(&e)),
    };
    let fd = match finite_diff_gradient(&spec, &xi, horizon, h) {
        Ok(g) => g,
        Err(e) => return Ok(numeric_exit(&e)),
    };
    let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = g
        .iter()
        .chain(&fd)
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let rel = diff / scale;

    let out = GradcheckOutput {
        tool: TOOL,
        version: VERSION,
        problem: path.display().to_string(),
        xi,
        horizon,
        fd_step: h,
        variational: g,
        central_difference: fd,
        relative_error: rel,
    };
    match opts.format {
        Format::Structured => report::print_structured(&out)?,
        Format::Text => {
            println!("{TOOL} {VERSION} gradcheck — {}", path.display());
            println!("variational gradient:  {:?}", out.variational);
            println!("central difference:    {:?}", out.central_difference);
            println!("relative error:        {:.3e}", out.relative_error);
        }
    }
    Ok(if rel < 1e-3 { EXIT_PASS } else { EXIT_VIOLATION })
}
