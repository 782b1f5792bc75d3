//! Plain `(x, y, stderr)` series extracted from result directories.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::bail;
use serde::{Deserialize, Serialize};

use crate::run::{read_rows, EPISODES_FILE};
use crate::stats::{mean, stderr};
use crate::sweep::{read_sweep_rows, SWEEP_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Seed-mean regret per `T` of a `T` sweep.
    RegretVsT,
    /// Seed-mean average regret per `N` of an `N` sweep.
    RegretVsN,
    /// Fraction of episodes covered at every boundary, per axis value.
    Coverage,
    /// Seed-mean `phi_distance` per episode index across run directories.
    Traces,
}

impl FromStr for PlotKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "regret-vs-T" => PlotKind::RegretVsT,
            "regret-vs-N" => PlotKind::RegretVsN,
            "coverage" => PlotKind::Coverage,
            "traces" => PlotKind::Traces,
            other => bail!("unknown plot kind `{other}` (regret-vs-T, regret-vs-N, coverage, traces)"),
        })
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlotKind::RegretVsT => "regret-vs-T",
            PlotKind::RegretVsN => "regret-vs-N",
            PlotKind::Coverage => "coverage",
            PlotKind::Traces => "traces",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub stderr: f64,
}

fn grouped(pairs: impl Iterator<Item = (usize, f64)>) -> Vec<Point> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (k, v) in pairs {
        by.entry(k).or_default().push(v);
    }
    by.into_iter()
        .map(|(k, ys)| Point { x: k as f64, y: mean(&ys), stderr: stderr(&ys) })
        .collect()
}

/// Every `episodes.csv` at or below `dir`, in path order.
fn episode_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let f = d.join(EPISODES_FILE);
        if f.is_file() {
            found.push(f);
        }
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn plotdata(dir: &Path, kind: PlotKind) -> anyhow::Result<Vec<Point>> {
    if !dir.exists() {
        bail!("missing result directory {}", dir.display());
    }
    match kind {
        PlotKind::RegretVsT | PlotKind::RegretVsN | PlotKind::Coverage => {
            let rows = read_sweep_rows(&dir.join(SWEEP_FILE))?;
            let want = match kind {
                PlotKind::RegretVsT => Some("T"),
                PlotKind::RegretVsN => Some("N"),
                _ => None,
            };
            if let (Some(w), Some(r)) = (want, rows.first()) {
                if r.axis != w {
                    bail!("{kind} needs a sweep over {w}, found one over {}", r.axis);
                }
            }
            Ok(match kind {
                PlotKind::Coverage => grouped(rows.iter().map(|r| (r.value, r.coverage_fraction))),
                _ => grouped(rows.iter().map(|r| (r.value, r.mean_regret))),
            })
        }
        PlotKind::Traces => {
            let files = episode_files(dir)?;
            if files.is_empty() {
                bail!("missing result file: no {EPISODES_FILE} under {}", dir.display());
            }
            let mut pairs = Vec::new();
            for f in files {
                pairs.extend(read_rows(&f)?.into_iter().map(|r| (r.episode_index, r.phi_distance)));
            }
            Ok(grouped(pairs.into_iter()))
        }
    }
}

pub fn write_points<W: Write>(w: W, points: &[Point]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["x", "y", "stderr"])?;
    for p in points {
        w.write_record([p.x.to_string(), p.y.to_string(), p.stderr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
