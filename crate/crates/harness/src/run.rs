//! Meta-runs: N episodes chained through the outer learner, and their
//! result files.

use std::fs;
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context};
use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use metarhc::linsys::NoiseModel;
use metarhc::outer::MetaState;
use metarhc::policy::{episode_metrics, run_episode, violation_scale, Episode, EpisodeTrace};
use metarhc::qp::{solve_full_horizon_baseline, SolveStats, SolverOptions};

use crate::config::{Experiment, Matrix, RunConfig};
use crate::stats::mean;

pub const EPISODES_FILE: &str = "episodes.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TIMING_FILE: &str = "timing.toml";

/// One result row per episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode_index: usize,
    pub seed: u64,
    pub regret: f64,
    pub baseline_cost: f64,
    pub policy_cost: f64,
    pub violation: f64,
    #[serde(rename = "E_theta")]
    pub e_theta: f64,
    pub coverage_all_intervals: u8,
    pub pe_all_intervals: u8,
    pub phi_distance: f64,
    pub intervals: usize,
    pub pe_passes: usize,
    /// Smallest `lambda_min / threshold` over the boundaries.
    pub pe_min_ratio: f64,
    pub max_step_violation: f64,
    /// Largest per-step violation over `|F_u|_inf 2 sqrt(c_p)`.
    pub step_violation_ratio: f64,
    pub violation_scale: f64,
    pub qp_solves: usize,
    pub qp_optimal: usize,
    pub qp_max_kkt: f64,
    pub qp_max_feas: f64,
}

pub const EPISODE_HEADER: [&str; 20] = [
    "episode_index",
    "seed",
    "regret",
    "baseline_cost",
    "policy_cost",
    "violation",
    "E_theta",
    "coverage_all_intervals",
    "pe_all_intervals",
    "phi_distance",
    "intervals",
    "pe_passes",
    "pe_min_ratio",
    "max_step_violation",
    "step_violation_ratio",
    "violation_scale",
    "qp_solves",
    "qp_optimal",
    "qp_max_kkt",
    "qp_max_feas",
];

/// Aggregates over the rows of one run; every field is recomputable from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub episodes: usize,
    /// Average regret across episodes.
    pub mean_regret: f64,
    pub mean_violation: f64,
    /// Average cumulative estimation error across episodes.
    pub mean_e_theta: f64,
    pub mean_phi_distance: f64,
    pub coverage_episodes: usize,
    pub pe_episodes: usize,
    /// `sum violation / sum violation_scale`.
    pub violation_ratio: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[EpisodeRow]) -> Self {
        let col = |f: fn(&EpisodeRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let v: f64 = rows.iter().map(|r| r.violation).sum();
        let vs: f64 = rows.iter().map(|r| r.violation_scale).sum();
        Aggregates {
            episodes: rows.len(),
            mean_regret: mean(&col(|r| r.regret)),
            mean_violation: mean(&col(|r| r.violation)),
            mean_e_theta: mean(&col(|r| r.e_theta)),
            mean_phi_distance: mean(&col(|r| r.phi_distance)),
            coverage_episodes: rows.iter().filter(|r| r.coverage_all_intervals == 1).count(),
            pe_episodes: rows.iter().filter(|r| r.pe_all_intervals == 1).count(),
            violation_ratio: v / vs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub n_c: usize,
    pub gamma: f64,
    pub delta_tilde: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j_star: Option<u64>,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "H_overridden")]
    pub h_overridden: bool,
    pub lambda: f64,
    pub r_tilde: f64,
    pub gamma_y: f64,
}

impl Derived {
    pub fn of(exp: &Experiment) -> Self {
        let k = &exp.policy.consts;
        Derived {
            n_c: k.n_c,
            gamma: k.gamma,
            delta_tilde: k.delta_tilde,
            j_star: k.j_star,
            h: k.h,
            h_overridden: k.h_overridden,
            lambda: k.lambda,
            r_tilde: k.r_tilde,
            gamma_y: k.gamma_y,
        }
    }
}

fn to_rows(m: &DMatrix<f64>) -> Matrix {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn from_rows(rows: &Matrix) -> anyhow::Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        bail!("ragged matrix");
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Serialized [`MetaState`], enough to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaSnapshot {
    pub next_episode: usize,
    pub phi: Matrix,
    pub losses: Vec<f64>,
    pub anchors: Vec<Matrix>,
    pub phi_history: Vec<Matrix>,
}

impl MetaSnapshot {
    pub fn of(state: &MetaState) -> Self {
        MetaSnapshot {
            next_episode: state.episode,
            phi: to_rows(&state.phi),
            losses: state.losses.clone(),
            anchors: state.anchors.iter().map(to_rows).collect(),
            phi_history: state.phi_history.iter().map(to_rows).collect(),
        }
    }

    pub fn restore(&self) -> anyhow::Result<MetaState> {
        let mut s = MetaState::new(from_rows(&self.phi)?);
        s.episode = self.next_episode;
        s.losses = self.losses.clone();
        s.anchors = self.anchors.iter().map(from_rows).collect::<anyhow::Result<_>>()?;
        s.phi_history = self.phi_history.iter().map(from_rows).collect::<anyhow::Result<_>>()?;
        Ok(s)
    }
}

/// The plant drawn for an episode; recorded for audit, never shown to the policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueSystem {
    pub episode_index: usize,
    pub seed: u64,
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub solves: usize,
    pub optimal: usize,
    pub max_kkt: f64,
    pub max_feas: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub run_seed: u64,
    pub episode_seeds: Vec<u64>,
    pub derived: Derived,
    pub aggregates: Aggregates,
    pub solver: SolverSummary,
    pub config: RunConfig,
    pub meta: MetaSnapshot,
    pub systems: Vec<TrueSystem>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Keep every episode trace in memory.
    pub keep_traces: bool,
    /// Continue from a saved meta state instead of `phi_init`.
    pub resume: Option<MetaState>,
    /// Stop after this episode instead of `N`.
    pub until: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub run_seed: u64,
    pub episode_seeds: Vec<u64>,
    pub rows: Vec<EpisodeRow>,
    pub systems: Vec<TrueSystem>,
    pub meta: MetaState,
    pub stats: SolveStats,
    pub traces: Vec<EpisodeTrace>,
}

impl RunResult {
    pub fn aggregates(&self) -> Aggregates {
        Aggregates::from_rows(&self.rows)
    }

    pub fn manifest(&self, exp: &Experiment) -> Manifest {
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            run_seed: self.run_seed,
            episode_seeds: self.episode_seeds.clone(),
            derived: Derived::of(exp),
            aggregates: self.aggregates(),
            solver: SolverSummary {
                solves: self.stats.solves,
                optimal: self.stats.optimal,
                max_kkt: self.stats.max_kkt,
                max_feas: self.stats.max_feas,
            },
            config: exp.config.clone(),
            meta: MetaSnapshot::of(&self.meta),
            systems: self.systems.clone(),
        }
    }
}

/// Episode seeds: explicit ones from the config, else `N` draws from
/// ChaCha8 seeded with the run seed.
pub fn episode_seeds(cfg: &RunConfig, run_seed: u64) -> Vec<u64> {
    if let Some(s) = &cfg.run.episode_seeds {
        return s.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    (0..cfg.episode.n).map(|_| rng.random()).collect()
}

/// Run episodes `meta.episode ..= N`: sample the plant, run the policy,
/// score it against the full-horizon baseline and update (or freeze) the prior.
pub fn run_meta(exp: &Experiment, run_seed: u64, opts: RunOptions) -> anyhow::Result<RunResult> {
    let cfg = &exp.config;
    let seeds = episode_seeds(cfg, run_seed);
    let mut meta = opts.resume.unwrap_or_else(|| MetaState::new(exp.phi_init.clone()));
    if meta.phi.shape() != exp.phi_init.shape() {
        bail!("resumed meta state has shape {:?}, expected {:?}", meta.phi.shape(), exp.phi_init.shape());
    }
    let first = meta.episode;
    if first == 0 || first > cfg.episode.n + 1 {
        bail!("resumed meta state points at episode {first}, the run has N = {}", cfg.episode.n);
    }
    let solver = SolverOptions {
        tol_kkt: cfg.control.tol_kkt,
        tol_feas: cfg.control.tol_feas,
        ..SolverOptions::default()
    };
    let f_inf = exp.constraints.f_inf_norm();
    let mut out = RunResult {
        run_seed,
        episode_seeds: seeds.clone(),
        rows: Vec::new(),
        systems: Vec::new(),
        meta: meta.clone(),
        stats: SolveStats::default(),
        traces: Vec::new(),
    };
    let last = opts.until.unwrap_or(cfg.episode.n).min(cfg.episode.n);
    for i in first..=last {
        let seed = seeds[i - 1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = exp.tasks.sample_with(&mut rng).with_context(|| format!("episode {i}: sampling the plant"))?;
        let noise = NoiseModel::new(cfg.episode.r, cfg.episode.eps_c, rng.random());
        let ep = Episode {
            sys: &sys,
            x_s: exp.x_s.clone(),
            noise,
            cost: &exp.cost,
            constraints: &exp.constraints,
            ambient: &exp.ambient,
            horizon: cfg.episode.t,
        };
        let trace = run_episode(&ep, &meta.phi, &exp.policy).with_context(|| format!("episode {i}"))?;
        let baseline = solve_full_horizon_baseline(&sys, &exp.cost, &exp.constraints, cfg.episode.t, &exp.x_s, &solver)
            .with_context(|| format!("episode {i}: baseline"))?;
        let met = episode_metrics(&trace, &baseline, &sys);
        let phi_distance = (&trace.anchor - &meta.phi).norm();
        let mut stats = trace.stats;
        stats.record(&baseline);
        let step_ratio = trace
            .steps
            .iter()
            .map(|s| s.violation / (f_inf * 2.0 * trace.schedule.c_p(s.interval).sqrt()))
            .fold(0.0, f64::max);
        let pe_min_ratio = trace
            .boundaries
            .iter()
            .map(|b| b.pe.lambda_min / b.pe.threshold)
            .fold(f64::INFINITY, f64::min);
        out.rows.push(EpisodeRow {
            episode_index: i,
            seed,
            regret: met.regret,
            baseline_cost: met.baseline_cost,
            policy_cost: met.policy_cost,
            violation: met.violation,
            e_theta: met.e_theta,
            coverage_all_intervals: trace.coverage_all() as u8,
            pe_all_intervals: trace.pe_all() as u8,
            phi_distance,
            intervals: trace.boundaries.len(),
            pe_passes: trace.pe_passes(),
            pe_min_ratio,
            max_step_violation: met.max_step_violation,
            step_violation_ratio: step_ratio,
            violation_scale: violation_scale(&trace.schedule),
            qp_solves: stats.solves,
            qp_optimal: stats.optimal,
            qp_max_kkt: stats.max_kkt,
            qp_max_feas: stats.max_feas,
        });
        out.stats.merge(&stats);
        out.systems.push(TrueSystem {
            episode_index: i,
            seed,
            a: to_rows(sys.a()),
            b: to_rows(sys.b()),
        });
        if cfg.flags.frozen_phi {
            meta.record_frozen(&trace.anchor);
        } else {
            meta.update(&trace.anchor, &exp.ambient);
        }
        log::debug!(
            "run {run_seed} episode {i}: regret {:.4} E {:.3} phi distance {:.4}",
            met.regret,
            met.e_theta,
            phi_distance
        );
        if opts.keep_traces {
            out.traces.push(trace);
        }
    }
    out.meta = meta;
    Ok(out)
}

pub fn write_rows(path: &Path, rows: &[EpisodeRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(EPISODE_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> anyhow::Result<Vec<EpisodeRow>> {
    if !path.exists() {
        bail!("missing result file {}", path.display());
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != EPISODE_HEADER {
        bail!("schema mismatch in {}: header {:?}", path.display(), header);
    }
    r.deserialize()
        .collect::<Result<Vec<EpisodeRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

pub fn read_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct Timing {
    wall_clock_seconds: f64,
    episodes: usize,
}

/// `episodes.csv` and `manifest.toml` are deterministic; wall-clock goes to
/// `timing.toml` so the other two compare byte for byte.
pub fn write_run(dir: &Path, exp: &Experiment, result: &RunResult, elapsed: Option<Duration>) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_rows(&dir.join(EPISODES_FILE), &result.rows)?;
    let manifest = toml::to_string(&result.manifest(exp)).context("serializing manifest")?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    if let Some(e) = elapsed {
        let t = Timing { wall_clock_seconds: e.as_secs_f64(), episodes: result.rows.len() };
        fs::write(dir.join(TIMING_FILE), toml::to_string(&t)?)?;
    }
    Ok(())
}
