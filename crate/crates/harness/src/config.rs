//! Run configuration: a TOML document with one table per concern.
//!
//! ```toml
//! [system]       # n, m, x_s, S, rho_max, anchor_A, anchor_B, task_radius, max_rejections
//! [episode]      # T, N, delta, R, eps_c
//! [learner]      # H ("auto" | int), lambda ("auto" | float), beta, phi_init
//! [control]      # M, clamp_to_interval, feedback, candidates, execution, tol_kkt, tol_feas
//! [cost]         # Q, R  or  stages = [{ Q, R }, ...]
//! [constraints]  # lower, upper  or  F, b
//! [flags]        # perturbation, frozen_phi
//! [run]          # seeds, episode_seeds, workers
//! ```
//!
//! Matrices are arrays of rows. Unknown keys are rejected.

use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use metarhc::inner::{BetaVariant, InnerConstants, ProblemSize};
use metarhc::linsys::{SystemParams, ThetaSet};
use metarhc::policy::{Feedback, PolicyConfig};
use metarhc::qp::{InputPolytope, QuadCostSpec, SolverOptions};
use metarhc::Execution;

pub const DESK: &str = include_str!("../presets/desk.toml");
pub const SCALAR: &str = include_str!("../presets/scalar.toml");

pub type Matrix = Vec<Vec<f64>>;

/// `"auto"` or an explicit value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Auto<T> {
    Keyword(AutoKeyword),
    Value(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

impl<T: Copy> Auto<T> {
    pub fn value(&self) -> Option<T> {
        match self {
            Auto::Keyword(_) => None,
            Auto::Value(v) => Some(*v),
        }
    }
}

impl<T> Default for Auto<T> {
    fn default() -> Self {
        Auto::Keyword(AutoKeyword::Auto)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub episode: EpisodeSection,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default)]
    pub control: ControlSection,
    pub cost: CostSection,
    pub constraints: ConstraintSection,
    #[serde(default)]
    pub flags: FlagSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n: usize,
    pub m: usize,
    /// Initial state, zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_s: Option<Vec<f64>>,
    #[serde(rename = "S")]
    pub s: f64,
    pub rho_max: f64,
    #[serde(rename = "anchor_A", default, skip_serializing_if = "Option::is_none")]
    pub anchor_a: Option<Matrix>,
    #[serde(rename = "anchor_B", default, skip_serializing_if = "Option::is_none")]
    pub anchor_b: Option<Matrix>,
    #[serde(default)]
    pub task_radius: f64,
    #[serde(default = "default_rejections")]
    pub max_rejections: usize,
}

fn default_rejections() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub delta: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub eps_c: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaForm {
    #[default]
    Equation,
    Algorithm,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    #[serde(rename = "H", default)]
    pub h: Auto<usize>,
    #[serde(default)]
    pub lambda: Auto<f64>,
    #[serde(default)]
    pub beta: BetaForm,
    /// Initial meta-parameter `[A, B]`, zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_init: Option<Matrix>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    #[default]
    Nominal,
    Observation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    #[default]
    Parallel,
    Sequential,
}

impl From<ExecutionMode> for Execution {
    fn from(m: ExecutionMode) -> Self {
        match m {
            ExecutionMode::Parallel => Execution::Parallel,
            ExecutionMode::Sequential => Execution::Sequential,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(default = "yes")]
    pub clamp_to_interval: bool,
    #[serde(default)]
    pub feedback: FeedbackMode,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default)]
    pub execution: ExecutionMode,
    #[serde(default = "default_tol_kkt")]
    pub tol_kkt: f64,
    #[serde(default = "default_tol_feas")]
    pub tol_feas: f64,
}

fn default_m() -> usize {
    12
}
fn yes() -> bool {
    true
}
fn default_candidates() -> usize {
    8
}
fn default_tol_kkt() -> f64 {
    1e-8
}
fn default_tol_feas() -> f64 {
    1e-9
}

impl Default for ControlSection {
    fn default() -> Self {
        ControlSection {
            m: default_m(),
            clamp_to_interval: true,
            feedback: FeedbackMode::Nominal,
            candidates: default_candidates(),
            execution: ExecutionMode::Parallel,
            tol_kkt: default_tol_kkt(),
            tol_feas: default_tol_feas(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    #[serde(rename = "Q")]
    pub q: Matrix,
    #[serde(rename = "R")]
    pub r: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Matrix>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Matrix>,
    /// Periodic schedule; stage `t` uses entry `t mod len`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<Stage>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagSection {
    #[serde(default = "yes")]
    pub perturbation: bool,
    #[serde(default)]
    pub frozen_phi: bool,
}

impl Default for FlagSection {
    fn default() -> Self {
        FlagSection { perturbation: true, frozen_phi: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// One meta-run per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Explicit per-episode seeds; otherwise drawn from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_seeds: Option<Vec<u64>>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_workers() -> usize {
    1
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seeds: default_seeds(), episode_seeds: None, workers: 1 }
    }
}

/// A config problem tied to a dotted field path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

pub fn preset(name: &str) -> anyhow::Result<&'static str> {
    match name {
        "desk" => Ok(DESK),
        "scalar" => Ok(SCALAR),
        other => bail!("unknown preset `{other}` (expected desk or scalar)"),
    }
}

/// Parse a document, apply `KEY=VALUE` overrides and validate.
pub fn load_str(text: &str, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = if overrides.is_empty() {
        toml::from_str(text).context("config does not match the schema")?
    } else {
        toml::Value::Table(table)
            .try_into()
            .context("config (after overrides) does not match the schema")?
    };
    cfg.check()?;
    Ok(cfg)
}

pub fn load_file(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    load_str(&text, overrides).with_context(|| format!("loading {}", path.display()))
}

/// Set `a.b.c = value` in a TOML table. The value is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not KEY=VALUE"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn matrix(rows: &Matrix, r: usize, c: usize) -> Option<DMatrix<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return None;
    }
    Some(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn shape(rows: &Matrix) -> String {
    let cols: Vec<usize> = rows.iter().map(|r| r.len()).collect();
    match cols.first() {
        Some(&c) if cols.iter().all(|&x| x == c) => format!("{}x{}", rows.len(), c),
        Some(_) => "ragged".into(),
        None => "0x0".into(),
    }
}

impl RunConfig {
    /// Structural checks, all reported at once.
    pub fn check(&self) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        let mut err = |path: &str, msg: String| errs.push(FieldError { path: path.into(), message: msg });
        let s = &self.system;
        let (n, m) = (s.n, s.m);
        if n == 0 {
            err("system.n", "must be positive".into());
        }
        if m == 0 {
            err("system.m", "must be positive".into());
        }
        if let Some(x) = &s.x_s {
            if x.len() != n {
                err("system.x_s", format!("has length {}, expected n = {n}", x.len()));
            }
        }
        if !(s.s > 0.0) {
            err("system.S", "must be positive".into());
        }
        if !(s.rho_max > 0.0 && s.rho_max < 1.0) {
            err("system.rho_max", "must lie in (0, 1)".into());
        }
        if !(s.task_radius >= 0.0) {
            err("system.task_radius", "must be nonnegative".into());
        }
        match (&s.anchor_a, &s.anchor_b) {
            (Some(a), Some(b)) => {
                if matrix(a, n, n).is_none() {
                    err("system.anchor_A", format!("is {}, expected {n}x{n}", shape(a)));
                }
                if matrix(b, n, m).is_none() {
                    err("system.anchor_B", format!("is {}, expected {n}x{m}", shape(b)));
                }
            }
            (None, None) => {}
            (Some(_), None) => err("system.anchor_B", "required when anchor_A is set".into()),
            (None, Some(_)) => err("system.anchor_A", "required when anchor_B is set".into()),
        }
        let e = &self.episode;
        if e.t == 0 {
            err("episode.T", "must be positive".into());
        }
        if e.n == 0 {
            err("episode.N", "must be positive".into());
        }
        if !(e.delta > 0.0 && e.delta < 1.0) {
            err("episode.delta", "must lie in (0, 1)".into());
        }
        if !(e.r >= 0.0) {
            err("episode.R", "must be nonnegative".into());
        }
        if !(e.eps_c > 0.0) {
            err("episode.eps_c", "must be positive".into());
        }
        let l = &self.learner;
        if l.h.value() == Some(0) {
            err("learner.H", "must be positive".into());
        }
        if let Some(lam) = l.lambda.value() {
            if !(lam >= 0.0) {
                err("learner.lambda", "must be nonnegative".into());
            }
        }
        if let Some(p) = &l.phi_init {
            if matrix(p, n, n + m).is_none() {
                err("learner.phi_init", format!("is {}, expected {n}x{}", shape(p), n + m));
            }
        }
        let c = &self.control;
        if c.m == 0 {
            err("control.M", "must be positive".into());
        }
        if c.candidates == 0 {
            err("control.candidates", "must be positive".into());
        }
        if !(c.tol_kkt > 0.0) {
            err("control.tol_kkt", "must be positive".into());
        }
        if !(c.tol_feas > 0.0) {
            err("control.tol_feas", "must be positive".into());
        }
        let cost = &self.cost;
        match (&cost.q, &cost.r, &cost.stages) {
            (Some(q), Some(r), None) => {
                if matrix(q, n, n).is_none() {
                    err("cost.Q", format!("is {}, expected {n}x{n}", shape(q)));
                }
                if matrix(r, m, m).is_none() {
                    err("cost.R", format!("is {}, expected {m}x{m}", shape(r)));
                }
            }
            (None, None, Some(stages)) => {
                if stages.is_empty() {
                    err("cost.stages", "must not be empty".into());
                }
                for (k, st) in stages.iter().enumerate() {
                    if matrix(&st.q, n, n).is_none() {
                        err(&format!("cost.stages[{k}].Q"), format!("is {}, expected {n}x{n}", shape(&st.q)));
                    }
                    if matrix(&st.r, m, m).is_none() {
                        err(&format!("cost.stages[{k}].R"), format!("is {}, expected {m}x{m}", shape(&st.r)));
                    }
                }
            }
            _ => err("cost", "give either Q and R, or stages".into()),
        }
        let u = &self.constraints;
        match (&u.lower, &u.upper, &u.f, &u.b) {
            (Some(lo), Some(hi), None, None) => {
                if lo.len() != m {
                    err("constraints.lower", format!("has length {}, expected m = {m}", lo.len()));
                }
                if hi.len() != m {
                    err("constraints.upper", format!("has length {}, expected m = {m}", hi.len()));
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    err("constraints", "need lower < upper componentwise".into());
                }
            }
            (None, None, Some(f), Some(b)) => {
                if f.is_empty() || f.iter().any(|r| r.len() != m) {
                    err("constraints.F", format!("is {}, expected k x {m}", shape(f)));
                }
                if b.len() != f.len() {
                    err("constraints.b", format!("has length {}, expected {}", b.len(), f.len()));
                }
            }
            _ => err("constraints", "give either lower and upper, or F and b".into()),
        }
        let r = &self.run;
        if r.seeds.is_empty() {
            err("run.seeds", "must not be empty".into());
        }
        if let Some(es) = &r.episode_seeds {
            if es.len() != e.n {
                err("run.episode_seeds", format!("has {} entries, expected N = {}", es.len(), e.n));
            }
        }
        if r.workers == 0 {
            err("run.workers", "must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn problem_size(&self) -> ProblemSize {
        ProblemSize {
            n: self.system.n,
            m: self.system.m,
            t: self.episode.t,
            episodes: self.episode.n,
            delta: self.episode.delta,
            r: self.episode.r,
            s: self.system.s,
        }
    }

    pub fn anchor(&self) -> anyhow::Result<Option<SystemParams>> {
        let s = &self.system;
        match (&s.anchor_a, &s.anchor_b) {
            (Some(a), Some(b)) => {
                let a = matrix(a, s.n, s.n).ok_or_else(|| anyhow!("system.anchor_A: wrong shape"))?;
                let b = matrix(b, s.n, s.m).ok_or_else(|| anyhow!("system.anchor_B: wrong shape"))?;
                Ok(Some(SystemParams::new(a, b).context("system.anchor")?))
            }
            _ => Ok(None),
        }
    }

    pub fn constants(&self) -> anyhow::Result<InnerConstants> {
        let mut k = InnerConstants::derive(&self.problem_size(), self.learner.h.value(), self.learner.lambda.value())
            .context("learner")?;
        k.beta_variant = match self.learner.beta {
            BetaForm::Equation => BetaVariant::Equation,
            BetaForm::Algorithm => BetaVariant::Algorithm,
        };
        Ok(k)
    }
}

/// Everything a meta-run needs, built from a checked [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    /// Known parameter set handed to the learner.
    pub ambient: ThetaSet,
    /// Distribution episodes are drawn from.
    pub tasks: ThetaSet,
    pub cost: QuadCostSpec,
    pub constraints: InputPolytope,
    pub x_s: DVector<f64>,
    pub policy: PolicyConfig,
    pub phi_init: DMatrix<f64>,
}

impl Experiment {
    pub fn new(config: &RunConfig) -> anyhow::Result<Self> {
        config.check()?;
        let s = &config.system;
        let (n, m) = (s.n, s.m);
        let mut ambient = ThetaSet::new(n, m, s.s, s.rho_max);
        ambient.max_rejections = s.max_rejections;
        let tasks = match config.anchor()? {
            Some(a) => ambient.clone().with_anchor(a, s.task_radius),
            None => ambient.clone(),
        };
        tasks.validate().context("system")?;
        let cost = match (&config.cost.q, &config.cost.r, &config.cost.stages) {
            (Some(q), Some(r), None) => QuadCostSpec::constant(
                matrix(q, n, n).expect("checked"),
                matrix(r, m, m).expect("checked"),
            ),
            (_, _, Some(stages)) => QuadCostSpec::periodic(
                stages
                    .iter()
                    .map(|st| (matrix(&st.q, n, n).expect("checked"), matrix(&st.r, m, m).expect("checked")))
                    .collect(),
            ),
            _ => unreachable!("checked"),
        }
        .context("cost")?;
        let u = &config.constraints;
        let constraints = match (&u.lower, &u.upper, &u.f, &u.b) {
            (Some(lo), Some(hi), _, _) => InputPolytope::from_box(lo, hi),
            (_, _, Some(f), Some(b)) => InputPolytope::new(
                matrix(f, f.len(), m).expect("checked"),
                DVector::from_column_slice(b),
            ),
            _ => unreachable!("checked"),
        }
        .context("constraints")?;
        let x_s = s.x_s.as_ref().map_or_else(|| DVector::zeros(n), |x| DVector::from_column_slice(x));
        let consts = config.constants()?;
        let solver = SolverOptions {
            tol_kkt: config.control.tol_kkt,
            tol_feas: config.control.tol_feas,
            ..SolverOptions::default()
        };
        let mut policy = PolicyConfig::new(consts, config.episode.eps_c);
        policy.mpc.horizon = config.control.m;
        policy.mpc.clamp_to_interval = config.control.clamp_to_interval;
        policy.mpc.solver = solver;
        policy.select.candidates = config.control.candidates;
        policy.select.solver = solver;
        policy.select.execution = config.control.execution.into();
        policy.perturb = config.flags.perturbation;
        policy.feedback = match config.control.feedback {
            FeedbackMode::Nominal => Feedback::Nominal,
            FeedbackMode::Observation => Feedback::Observation,
        };
        let phi_init = match &config.learner.phi_init {
            Some(p) => matrix(p, n, n + m).expect("checked"),
            None => DMatrix::zeros(n, n + m),
        };
        if config.episode.n < config.episode.t {
            log::info!(
                "N = {} is below T = {}; the regret bound assumes N >= T",
                config.episode.n,
                config.episode.t
            );
        }
        Ok(Experiment {
            config: config.clone(),
            ambient,
            tasks,
            cost,
            constraints,
            x_s,
            policy,
            phi_init,
        })
    }

    pub fn n(&self) -> usize {
        self.config.system.n
    }

    pub fn m(&self) -> usize {
        self.config.system.m
    }
}
