//! Joint choice of the interval's initial-state estimate and model.
//!
//! The problem is nonconvex in (x̂, θ̂), so a fixed candidate list is scored
//! instead: the projected center of the confidence set plus quasi-random
//! points in the ball. Each candidate model gets a convex QP over the
//! window's inputs, with x̂ either pinned to `y` or released and projected
//! back onto the ε-ball.

use nalgebra::{DMatrix, DVector};

use super::halton::Halton;
use super::ConfidenceSet;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linsys::SystemParams;
use crate::outer::project_theta;
use crate::qp::{solve_horizon, HorizonProblem, InitialState, InputPolytope, QuadCostSpec, SolveStats, SolverOptions};

/// Relative cost gap below which two candidates count as tied.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SelectInput<'a> {
    /// First step of the window (the time `y` was observed).
    pub t: usize,
    /// Last step of the window, inclusive.
    pub window_end: usize,
    pub y: &'a DVector<f64>,
    pub eps_c: f64,
    pub set: &'a ConfidenceSet,
    pub cost: &'a QuadCostSpec,
    pub constraints: &'a InputPolytope,
}

impl SelectInput<'_> {
    pub fn horizon(&self) -> usize {
        self.window_end + 1 - self.t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectConfig {
    /// Number of candidate models, including the center.
    pub candidates: usize,
    pub solver: SolverOptions,
    pub execution: Execution,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            candidates: 8,
            solver: SolverOptions::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CandidateEval {
    pub index: usize,
    pub theta: DMatrix<f64>,
    pub x_hat: DVector<f64>,
    pub cost: f64,
    /// Frobenius distance to the confidence-set center.
    pub distance: f64,
    pub stats: SolveStats,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub theta: DMatrix<f64>,
    pub x_hat: DVector<f64>,
    pub cost: f64,
    pub index: usize,
    pub evaluations: Vec<CandidateEval>,
    pub stats: SolveStats,
}

/// Candidate list for a confidence set: the projected center first, then up to
/// `k - 1` Halton points of the ball that pass the membership test.
pub fn candidate_models(set: &ConfidenceSet, k: usize) -> Vec<DMatrix<f64>> {
    let mut out = vec![project_theta(&set.center, &set.ambient)];
    let r_eff = set.radius.min(set.ambient.radius + set.center.norm());
    if k <= 1 || r_eff <= 0.0 {
        return out;
    }
    let (rows, cols) = set.center.shape();
    let d = rows * cols;
    let pairs = d.div_ceil(2);
    let mut halton = Halton::new(2 * pairs + 1);
    for _ in 0..64 * k {
        if out.len() >= k {
            break;
        }
        let p = halton.next().expect("infinite sequence");
        // Box-Muller on consecutive coordinate pairs for a direction
        let mut g = Vec::with_capacity(2 * pairs);
        for q in 0..pairs {
            let (u1, u2) = (p[2 * q], p[2 * q + 1]);
            let rad = (-2.0 * u1.ln()).sqrt();
            let ang = 2.0 * std::f64::consts::PI * u2;
            g.push(rad * ang.cos());
            g.push(rad * ang.sin());
        }
        let dir = DMatrix::from_column_slice(rows, cols, &g[..d]);
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        let scale = r_eff * p[2 * pairs].powf(1.0 / d as f64) / norm;
        let cand = &set.center + dir * scale;
        if set.contains(&cand) {
            out.push(cand);
        }
    }
    out
}

fn solve_cost(
    input: &SelectInput,
    sys: &SystemParams,
    x0: InitialState,
    opts: &SolverOptions,
    stats: &mut SolveStats,
) -> Result<(DVector<f64>, f64)> {
    let p = HorizonProblem::new(sys, x0, input.horizon(), input.t, input.cost, input.constraints);
    let sol = solve_horizon(&p, opts)?;
    stats.record(&sol);
    Ok((sol.x0().clone(), sol.objective))
}

fn evaluate(input: &SelectInput, index: usize, theta: &DMatrix<f64>, opts: &SolverOptions) -> Result<CandidateEval> {
    let sys = SystemParams::from_theta(theta)?;
    let mut stats = SolveStats::default();
    let y = input.y;
    let (x_hat, cost) = if input.eps_c == 0.0 {
        solve_cost(input, &sys, InitialState::Fixed(y.clone()), opts, &mut stats)?
    } else {
        let (x_free, c_free) = solve_cost(input, &sys, InitialState::Free, opts, &mut stats)?;
        let gap = (&x_free - y).norm();
        if gap <= input.eps_c {
            (x_free, c_free)
        } else {
            let edge = y + (&x_free - y) * (input.eps_c / gap);
            let at_edge = solve_cost(input, &sys, InitialState::Fixed(edge), opts, &mut stats)?;
            let at_y = solve_cost(input, &sys, InitialState::Fixed(y.clone()), opts, &mut stats)?;
            if at_edge.1 < at_y.1 {
                at_edge
            } else {
                at_y
            }
        }
    };
    Ok(CandidateEval {
        index,
        theta: theta.clone(),
        x_hat,
        cost,
        distance: (theta - &input.set.center).norm(),
        stats,
    })
}

/// Score the given candidates and return the cheapest. Near-ties (relative
/// gap below [`TIE_TOL`]) go to the candidate closer to the center, then to
/// the lower index.
pub fn select_from(input: &SelectInput, candidates: &[DMatrix<f64>], cfg: &SelectConfig) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidates", "need at least one"));
    }
    if input.window_end < input.t {
        return Err(Error::invalid("window", "ends before it starts"));
    }
    if !(input.eps_c >= 0.0) {
        return Err(Error::invalid("eps_c", "must be nonnegative"));
    }
    let indexed: Vec<(usize, &DMatrix<f64>)> = candidates.iter().enumerate().collect();
    let evals = cfg
        .execution
        .map(&indexed, |&(i, th)| evaluate(input, i, th, &cfg.solver))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let best_cost = evals.iter().map(|e| e.cost).fold(f64::INFINITY, f64::min);
    let slack = TIE_TOL * best_cost.abs().max(1.0);
    let winner = evals
        .iter()
        .filter(|e| e.cost <= best_cost + slack)
        .min_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)))
        .expect("nonempty");
    let mut stats = SolveStats::default();
    for e in &evals {
        stats.merge(&e.stats);
    }
    Ok(Selection {
        theta: winner.theta.clone(),
        x_hat: winner.x_hat.clone(),
        cost: winner.cost,
        index: winner.index,
        stats,
        evaluations: evals,
    })
}

/// SELECT over the default candidate list of `input.set`.
pub fn select(input: &SelectInput, cfg: &SelectConfig) -> Result<Selection> {
    let cands = candidate_models(input.set, cfg.candidates.max(1));
    select_from(input, &cands, cfg)
}
