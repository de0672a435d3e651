//! On-disk problem and challenger documents: a JSON-compatible key-value
//! tree with expression strings. Unknown keys are rejected so typos fail
//! loudly instead of silently falling back to defaults.

use anyhow::{bail, Context, Result};
use horizon_pmp::problem::{
    ControlBox, ControlSignal, HorizonGrid, InitialSet, NumericSettings, ProblemSpec,
};
use horizon_pmp::{parse_expr, Expr};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub dim_state: usize,
    pub dim_control: usize,
    pub dynamics: Vec<String>,
    pub running_cost: String,
    #[serde(default = "zero_expr")]
    pub salvage: String,
    pub control_box: ControlBoxFile,
    pub initial_set: InitialSetFile,
    pub candidate_control: ControlFile,
    pub candidate_x0: Vec<f64>,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default)]
    pub settings: SettingsFile,
}

fn zero_expr() -> String {
    "0".to_string()
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBoxFile {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialSetFile {
    Free,
    Point(Vec<f64>),
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ControlFile {
    /// `[[t_start, [values...]], ...]`
    Piecewise(Vec<(f64, Vec<f64>)>),
    /// One expression of `t` per control component.
    Expr(Vec<String>),
}

/// Optional numeric overrides; anything omitted keeps the tool default.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsFile {
    pub step: Option<f64>,
    pub blowup_norm: Option<f64>,
    pub max_stored: Option<usize>,
    pub grid_t0: Option<f64>,
    pub grid_ratio: Option<f64>,
    pub grid_samples: Option<usize>,
    pub tol_abs: Option<f64>,
    pub tol_rel: Option<f64>,
    pub window: Option<usize>,
    pub identity_tol: Option<f64>,
    pub limit_tol: Option<f64>,
    pub adjoint_tol: Option<f64>,
    pub radius: Option<f64>,
    pub shells: Option<usize>,
    pub u_lattice: Option<usize>,
    pub t_samples: Option<usize>,
    pub check_horizon: Option<f64>,
    pub fd_step: Option<f64>,
}

impl SettingsFile {
    pub fn apply(&self, s: &mut NumericSettings) {
        let mut grid = s.grid;
        if let Some(v) = self.grid_t0 {
            grid.t0 = v;
        }
        if let Some(v) = self.grid_ratio {
            grid.ratio = v;
        }
        if let Some(v) = self.grid_samples {
            grid.count = v;
        }
        s.grid = grid;
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { s.$field = v; })*
            };
        }
        set!(
            step, blowup_norm, max_stored, tol_abs, tol_rel, window, identity_tol,
            limit_tol, adjoint_tol, radius, shells, u_lattice, t_samples,
            check_horizon, fd_step
        );
    }
}

fn parse_named(src: &str, m: usize, k: usize, what: &str) -> Result<Expr> {
    parse_expr(src, m, k).with_context(|| format!("{what}: `{src}`"))
}

pub fn control_from_file(file: ControlFile, m: usize, k: usize) -> Result<ControlSignal> {
    Ok(match file {
        ControlFile::Piecewise(segments) => ControlSignal::PiecewiseConstant(segments),
        ControlFile::Expr(sources) => {
            let mut exprs = Vec::with_capacity(sources.len());
            for (i, src) in sources.iter().enumerate() {
                exprs.push(parse_named(src, m, k, &format!("candidate_control.expr[{i}]"))?);
            }
            ControlSignal::ExprOfT(exprs)
        }
    })
}

impl ProblemFile {
    pub fn into_spec(self) -> Result<ProblemSpec> {
        let (m, k) = (self.dim_state, self.dim_control);
        if m == 0 || m > 9 {
            bail!("dim_state must be between 1 and 9, got {m}");
        }
        if k == 0 || k > 9 {
            bail!("dim_control must be between 1 and 9, got {k}");
        }
        let mut dynamics = Vec::with_capacity(self.dynamics.len());
        for (i, src) in self.dynamics.iter().enumerate() {
            dynamics.push(parse_named(src, m, k, &format!("dynamics[{i}]"))?);
        }
        let running_cost = parse_named(&self.running_cost, m, k, "running_cost")?;
        let salvage = parse_named(&self.salvage, m, k, "salvage")?;
        let initial_set = match self.initial_set {
            InitialSetFile::Free => InitialSet::Free,
            InitialSetFile::Point(p) => InitialSet::Point(p),
            InitialSetFile::Box { lo, hi } => InitialSet::Box { lo, hi },
        };
        let candidate_control = control_from_file(self.candidate_control, m, k)?;
        let mut settings = NumericSettings::default();
        self.settings.apply(&mut settings);

        let spec = ProblemSpec {
            state_dim: m,
            control_dim: k,
            dynamics,
            running_cost,
            salvage,
            control_box: ControlBox { lo: self.control_box.lo, hi: self.control_box.hi },
            initial_set,
            candidate_control,
            candidate_x0: self.candidate_x0,
            lambda: self.lambda,
            settings,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengerFile {
    pub x0: Vec<f64>,
    pub control: ControlFile,
}

pub fn load_problem(path: &Path) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read problem file {}", path.display()))?;
    let file: ProblemFile = serde_json::from_str(&text)
        .with_context(|| format!("malformed problem file {}", path.display()))?;
    file.into_spec()
        .with_context(|| format!("invalid problem in {}", path.display()))
}

pub fn load_challenger(path: &Path, spec: &ProblemSpec) -> Result<(Vec<f64>, ControlSignal)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read challenger file {}", path.display()))?;
    let file: ChallengerFile = serde_json::from_str(&text)
        .with_context(|| format!("malformed challenger file {}", path.display()))?;
    let control = control_from_file(file.control, spec.state_dim, spec.control_dim)?;
    Ok((file.x0, control))
}

/// Grid for limit probes, from the (possibly overridden) settings.
pub fn grid_of(spec: &ProblemSpec) -> HorizonGrid {
    spec.settings.grid
}
