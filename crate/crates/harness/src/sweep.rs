//! Sweeps over `T` or `N`: the cross product of axis values and run seeds.
//!
//! Cells run concurrently on a pool of `workers` threads. Each cell is
//! sequential inside, writes its own directory, and the merged tables are
//! ordered by cell key.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use metarhc::exec::with_workers;
use metarhc::Execution;

use crate::config::{ExecutionMode, Experiment, RunConfig};
use crate::run::{run_meta, write_run, Aggregates, RunOptions};
use crate::stats::{loglog_slope, mean, stderr};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const POINTS_FILE: &str = "points.csv";
pub const SWEEP_MANIFEST: &str = "sweep.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    T,
    N,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::T => "T",
            Axis::N => "N",
        })
    }
}

impl FromStr for Axis {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "T" | "t" => Ok(Axis::T),
            "N" | "n" => Ok(Axis::N),
            other => bail!("unknown sweep axis `{other}` (expected T or N)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

/// One row per (axis value, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub seed: u64,
    pub episodes: usize,
    pub mean_regret: f64,
    pub mean_violation: f64,
    #[serde(rename = "mean_E_theta")]
    pub mean_e_theta: f64,
    pub mean_phi_distance: f64,
    pub coverage_fraction: f64,
    pub pe_fraction: f64,
    pub violation_ratio: f64,
}

pub const SWEEP_HEADER: [&str; 11] = [
    "axis",
    "value",
    "seed",
    "episodes",
    "mean_regret",
    "mean_violation",
    "mean_E_theta",
    "mean_phi_distance",
    "coverage_fraction",
    "pe_fraction",
    "violation_ratio",
];

impl SweepRow {
    fn new(axis: Axis, value: usize, seed: u64, a: &Aggregates) -> Self {
        SweepRow {
            axis: axis.to_string(),
            value,
            seed,
            episodes: a.episodes,
            mean_regret: a.mean_regret,
            mean_violation: a.mean_violation,
            mean_e_theta: a.mean_e_theta,
            mean_phi_distance: a.mean_phi_distance,
            coverage_fraction: a.coverage_episodes as f64 / a.episodes as f64,
            pe_fraction: a.pe_episodes as f64 / a.episodes as f64,
            violation_ratio: a.violation_ratio,
        }
    }
}

/// Seed-averaged statistics at one axis value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAggregate {
    pub value: usize,
    pub seeds: usize,
    pub regret: f64,
    pub regret_stderr: f64,
    pub violation: f64,
    pub violation_stderr: f64,
    #[serde(rename = "E_theta")]
    pub e_theta: f64,
    #[serde(rename = "E_theta_stderr")]
    pub e_theta_stderr: f64,
    pub violation_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub regret: Option<f64>,
    pub violation: Option<f64>,
    #[serde(rename = "E_theta")]
    pub e_theta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub value: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: Axis,
    pub cells: Vec<SweepRow>,
    pub points: Vec<PointAggregate>,
    pub slopes: Slopes,
    pub failures: Vec<CellFailure>,
}

impl SweepResult {
    /// Per-point aggregates and slopes recomputed from `cells`.
    pub fn from_cells(axis: Axis, cells: Vec<SweepRow>, failures: Vec<CellFailure>) -> Self {
        let mut values: Vec<usize> = cells.iter().map(|c| c.value).collect();
        values.dedup();
        let points: Vec<PointAggregate> = values
            .iter()
            .map(|&v| {
                let at: Vec<&SweepRow> = cells.iter().filter(|c| c.value == v).collect();
                let col = |f: fn(&SweepRow) -> f64| at.iter().map(|c| f(c)).collect::<Vec<_>>();
                PointAggregate {
                    value: v,
                    seeds: at.len(),
                    regret: mean(&col(|c| c.mean_regret)),
                    regret_stderr: stderr(&col(|c| c.mean_regret)),
                    violation: mean(&col(|c| c.mean_violation)),
                    violation_stderr: stderr(&col(|c| c.mean_violation)),
                    e_theta: mean(&col(|c| c.mean_e_theta)),
                    e_theta_stderr: stderr(&col(|c| c.mean_e_theta)),
                    violation_ratio: mean(&col(|c| c.violation_ratio)),
                }
            })
            .collect();
        let xs: Vec<f64> = points.iter().map(|p| p.value as f64).collect();
        let slope = |f: fn(&PointAggregate) -> f64| loglog_slope(&xs, &points.iter().map(f).collect::<Vec<_>>());
        let slopes = Slopes {
            regret: slope(|p| p.regret),
            violation: slope(|p| p.violation),
            e_theta: slope(|p| p.e_theta),
        };
        SweepResult { axis, cells, points, slopes, failures }
    }
}

#[derive(Serialize, Deserialize)]
struct SweepManifest {
    axis: Axis,
    values: Vec<usize>,
    seeds: Vec<u64>,
    completed: Vec<String>,
    failed: Vec<CellFailure>,
    slopes: Slopes,
    base_config: RunConfig,
}

pub fn cell_dir(axis: Axis, value: usize, seed: u64) -> PathBuf {
    PathBuf::from(format!("{axis}_{value}")).join(format!("seed_{seed}"))
}

fn cell_config(base: &RunConfig, axis: Axis, value: usize, parallel_cells: bool) -> RunConfig {
    let mut cfg = base.clone();
    match axis {
        Axis::T => cfg.episode.t = value,
        Axis::N => {
            cfg.episode.n = value;
            if let Some(es) = &mut cfg.run.episode_seeds {
                es.truncate(value);
            }
        }
    }
    if parallel_cells {
        cfg.control.execution = ExecutionMode::Sequential;
    }
    cfg
}

/// Run every cell. Completed cells are written even when others fail; the
/// sweep then returns an error after writing the manifest.
pub fn sweep(base: &RunConfig, spec: &SweepSpec, out: Option<&Path>) -> anyhow::Result<SweepResult> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        bail!("sweep needs at least one axis value and one seed");
    }
    if spec.values.windows(2).any(|w| w[0] >= w[1]) {
        bail!("sweep axis values must be strictly ascending, got {:?}", spec.values);
    }
    if spec.axis == Axis::N {
        if let Some(es) = &base.run.episode_seeds {
            if es.len() < *spec.values.last().expect("nonempty") {
                bail!("run.episode_seeds has fewer entries than the largest N");
            }
        }
    }
    let parallel_cells = spec.workers > 1;
    let cells: Vec<(usize, u64)> = spec
        .values
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run_cell = |&(value, seed): &(usize, u64)| -> anyhow::Result<SweepRow> {
        let cfg = cell_config(base, spec.axis, value, parallel_cells);
        let exp = Experiment::new(&cfg).with_context(|| format!("cell {}={value} seed {seed}", spec.axis))?;
        let start = Instant::now();
        let res = run_meta(&exp, seed, RunOptions::default())
            .with_context(|| format!("cell {}={value} seed {seed}", spec.axis))?;
        if let Some(dir) = out {
            write_run(&dir.join(cell_dir(spec.axis, value, seed)), &exp, &res, Some(start.elapsed()))?;
        }
        log::info!("cell {}={value} seed {seed} done", spec.axis);
        Ok(SweepRow::new(spec.axis, value, seed, &res.aggregates()))
    };
    let outcomes = with_workers(spec.workers, || Execution::Parallel.map(&cells, run_cell));
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ((value, seed), o) in cells.iter().zip(outcomes) {
        match o {
            Ok(r) => rows.push(r),
            Err(e) => failures.push(CellFailure { value: *value, seed: *seed, error: format!("{e:#}") }),
        }
    }
    let result = SweepResult::from_cells(spec.axis, rows, failures);
    if let Some(dir) = out {
        write_sweep(dir, base, spec, &result)?;
    }
    if let Some(f) = result.failures.first() {
        bail!(
            "{} of {} sweep cells failed; first: {}={} seed {}: {}",
            result.failures.len(),
            cells.len(),
            spec.axis,
            f.value,
            f.seed,
            f.error
        );
    }
    Ok(result)
}

fn write_sweep(dir: &Path, base: &RunConfig, spec: &SweepSpec, result: &SweepResult) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    write_sweep_rows(&dir.join(SWEEP_FILE), &result.cells)?;
    let mut w = csv::Writer::from_path(dir.join(POINTS_FILE))?;
    for p in &result.points {
        w.serialize(p)?;
    }
    w.flush()?;
    let manifest = SweepManifest {
        axis: spec.axis,
        values: spec.values.clone(),
        seeds: spec.seeds.clone(),
        completed: result
            .cells
            .iter()
            .map(|c| cell_dir(spec.axis, c.value, c.seed).display().to_string())
            .collect(),
        failed: result.failures.clone(),
        slopes: result.slopes.clone(),
        base_config: base.clone(),
    };
    fs::write(dir.join(SWEEP_MANIFEST), toml::to_string(&manifest)?)?;
    Ok(())
}

pub fn write_sweep_rows(path: &Path, rows: &[SweepRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(SWEEP_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_rows(path: &Path) -> anyhow::Result<Vec<SweepRow>> {
    if !path.exists() {
        bail!("missing result file {}", path.display());
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != SWEEP_HEADER {
        bail!("schema mismatch in {}: header {:?}", path.display(), header);
    }
    r.deserialize()
        .collect::<Result<Vec<SweepRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}
