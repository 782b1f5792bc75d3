//! One episode of the online controller: interval doubling, SELECT at every
//! boundary, receding-horizon control on the nominal trajectory and input
//! perturbation for excitation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::excite::{certify_pe, perturb, ExciteState, PECertificate, PerturbCase};
use crate::inner::{estimate_interval, select, ConfidenceSet, InnerConstants, RegressionData, SelectConfig, SelectInput};
use crate::linsys::{observe, step, NoiseModel, SystemParams, ThetaSet};
use crate::mpc::{propagate_nominal, Mpc, MpcConfig};
use crate::outer::episode_anchor;
use crate::qp::{InputPolytope, QPSolution, QuadCostSpec, SolveStats};

/// Interval ends `t_j = H (2^j - 1)`, the last one clipped to `T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntervalSchedule {
    h: usize,
    horizon: usize,
    ends: Vec<usize>,
}

impl IntervalSchedule {
    pub fn new(h: usize, horizon: usize) -> Result<Self> {
        if h == 0 || horizon == 0 {
            return Err(Error::invalid("schedule", "H and T must be positive"));
        }
        let mut ends = Vec::new();
        let mut len = h;
        let mut end = 0usize;
        while end < horizon {
            end = end.saturating_add(len).min(horizon);
            ends.push(end);
            len = len.saturating_mul(2);
        }
        Ok(IntervalSchedule { h, horizon, ends })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of intervals `N_T`.
    pub fn count(&self) -> usize {
        self.ends.len()
    }

    pub fn ends(&self) -> &[usize] {
        &self.ends
    }

    /// `t_j` for `j = 1..=N_T`.
    pub fn end(&self, j: usize) -> usize {
        self.ends[j - 1]
    }

    /// `t^s_j = t_{j-1} + 1`.
    pub fn start(&self, j: usize) -> usize {
        if j == 1 {
            1
        } else {
            self.ends[j - 2] + 1
        }
    }

    /// Unclipped length `H_j = 2^{j-1} H`.
    pub fn nominal_length(&self, j: usize) -> usize {
        self.h << (j - 1)
    }

    /// Excitation level `c_{p,j} = H_j^{-1/2}`.
    pub fn c_p(&self, j: usize) -> f64 {
        1.0 / (self.nominal_length(j) as f64).sqrt()
    }

    /// Interval containing step `t`.
    pub fn interval_of(&self, t: usize) -> usize {
        self.ends.partition_point(|&e| e < t) + 1
    }
}

/// What the receding-horizon controller is fed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Feedback {
    /// The nominal state propagated by the estimate.
    #[default]
    Nominal,
    /// The noisy observation (ablation only).
    Observation,
}

#[derive(Clone, Debug)]
pub struct PolicyConfig {
    pub consts: InnerConstants,
    pub mpc: MpcConfig,
    pub select: SelectConfig,
    /// Radius of the ball SELECT searches for the initial state.
    pub eps_c: f64,
    pub perturb: bool,
    pub feedback: Feedback,
    /// Replace every confidence set by this single model (validation runs).
    pub oracle: Option<DMatrix<f64>>,
}

impl PolicyConfig {
    pub fn new(consts: InnerConstants, eps_c: f64) -> Self {
        PolicyConfig {
            consts,
            mpc: MpcConfig::default(),
            select: SelectConfig::default(),
            eps_c,
            perturb: true,
            feedback: Feedback::Nominal,
            oracle: None,
        }
    }
}

/// The world one episode runs in. The plant is only touched through
/// `step` and `observe`.
#[derive(Clone, Debug)]
pub struct Episode<'a> {
    pub sys: &'a SystemParams,
    pub x_s: DVector<f64>,
    pub noise: NoiseModel,
    pub cost: &'a QuadCostSpec,
    pub constraints: &'a InputPolytope,
    /// Known parameter set `Θ`.
    pub ambient: &'a ThetaSet,
    /// Episode length `T`.
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub x_nominal: DVector<f64>,
    pub u: DVector<f64>,
    pub delta_u: DVector<f64>,
    pub u_bar: DVector<f64>,
    pub stage_cost: f64,
    pub violation: f64,
    pub perturb_case: Option<PerturbCase>,
    /// Interval the step belongs to.
    pub interval: usize,
}

/// Output of SELECT at the start of interval `j + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRecord {
    /// Index of the completed interval (0 before any data).
    pub j: usize,
    pub t: usize,
    pub window_end: usize,
    pub theta_hat: DMatrix<f64>,
    pub x_hat: DVector<f64>,
    pub cost: f64,
    pub radius: f64,
}

/// Estimates formed from the data of intervals `1..=j`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryRecord {
    pub j: usize,
    /// `t_j`, the number of regression samples.
    pub t_end: usize,
    pub c_p: f64,
    pub theta_l: DMatrix<f64>,
    pub theta_star: DMatrix<f64>,
    pub rank_deficient: bool,
    pub beta: f64,
    /// Whether the true parameter lies in the confidence set.
    pub covered: bool,
    pub pe: PECertificate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub schedule: IntervalSchedule,
    pub steps: Vec<StepRecord>,
    pub selections: Vec<SelectionRecord>,
    pub boundaries: Vec<BoundaryRecord>,
    /// Model used at each step, `θ̃_1..θ̃_T`.
    pub models: Vec<DMatrix<f64>>,
    pub stats: SolveStats,
    /// `θ*,i`: the boundary fit farthest from the prior.
    pub anchor: DMatrix<f64>,
    pub phi: DMatrix<f64>,
}

impl EpisodeTrace {
    pub fn coverage_all(&self) -> bool {
        self.boundaries.iter().all(|b| b.covered)
    }

    pub fn pe_all(&self) -> bool {
        self.boundaries.iter().all(|b| b.pe.pass)
    }

    pub fn pe_passes(&self) -> usize {
        self.boundaries.iter().filter(|b| b.pe.pass).count()
    }

    pub fn policy_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.stage_cost).sum()
    }
}

struct Boundary {
    record: BoundaryRecord,
    set: ConfidenceSet,
}

fn close_interval(
    ep: &Episode,
    cfg: &PolicyConfig,
    schedule: &IntervalSchedule,
    phi: &DMatrix<f64>,
    j: usize,
    ys: &[DVector<f64>],
    us: &[DVector<f64>],
    zs: &[DVector<f64>],
) -> Result<Boundary> {
    let t_j = schedule.end(j);
    let c_p = schedule.c_p(j);
    let data = RegressionData::from_history(ys, us, t_j)?;
    let est = estimate_interval(&cfg.consts, &data, phi, c_p, ep.ambient)?;
    let pe = certify_pe(&zs[..t_j], j, c_p, cfg.consts.gamma);
    let covered = est.set.contains(&ep.sys.theta());
    let set = match &cfg.oracle {
        Some(th) => ConfidenceSet::new(th.clone(), 0.0, ep.ambient.clone())?,
        None => est.set,
    };
    Ok(Boundary {
        record: BoundaryRecord {
            j,
            t_end: t_j,
            c_p,
            theta_l: est.theta_l,
            theta_star: est.theta_star.theta,
            rank_deficient: est.theta_star.rank_deficient,
            beta: est.beta,
            covered,
            pe,
        },
        set,
    })
}

/// Run one episode against `ep.sys`, starting from prior `phi`.
pub fn run_episode(ep: &Episode, phi: &DMatrix<f64>, cfg: &PolicyConfig) -> Result<EpisodeTrace> {
    let (n, m) = (ep.sys.n(), ep.sys.m());
    let big_t = ep.horizon;
    if ep.x_s.len() != n {
        return Err(Error::dims("initial state", n, ep.x_s.len()));
    }
    if phi.shape() != (n, n + m) {
        return Err(Error::dims("prior columns", n + m, phi.ncols()));
    }
    let schedule = IntervalSchedule::new(cfg.consts.h, big_t)?;
    let mut noise = ep.noise.stream(n);
    let mut excite = ExciteState::new(n, m);
    let mut mpc = Mpc::new(cfg.mpc, ep.cost, ep.constraints)?;
    let mut stats = SolveStats::default();

    let mut x = ep.x_s.clone();
    let mut ys: Vec<DVector<f64>> = Vec::with_capacity(big_t + 1);
    let mut us: Vec<DVector<f64>> = Vec::with_capacity(big_t);
    let mut zs: Vec<DVector<f64>> = Vec::with_capacity(big_t);
    let mut steps = Vec::with_capacity(big_t);
    let mut models = Vec::with_capacity(big_t);
    let mut selections = Vec::new();
    let mut boundaries = Vec::new();

    let mut j = 0usize;
    let mut model = SystemParams::from_theta(phi)?;
    let mut xbar = x.clone();
    let mut window_end = schedule.end(1);

    for t in 1..=big_t {
        let y = observe(&x, &mut noise);
        ys.push(y.clone());
        if t == 1 || t == schedule.end(j) + 1 {
            let set = if t == 1 {
                match &cfg.oracle {
                    Some(th) => ConfidenceSet::new(th.clone(), 0.0, ep.ambient.clone())?,
                    None => ConfidenceSet::whole(phi.clone(), ep.ambient.clone())?,
                }
            } else {
                let b = close_interval(ep, cfg, &schedule, phi, j, &ys, &us, &zs).map_err(|e| e.at_step(t))?;
                boundaries.push(b.record);
                b.set
            };
            window_end = schedule.end(j + 1);
            let input = SelectInput {
                t,
                window_end,
                y: &y,
                eps_c: cfg.eps_c,
                set: &set,
                cost: ep.cost,
                constraints: ep.constraints,
            };
            let sel = select(&input, &cfg.select).map_err(|e| e.at_step(t))?;
            stats.merge(&sel.stats);
            model = SystemParams::from_theta(&sel.theta)?;
            xbar = sel.x_hat.clone();
            selections.push(SelectionRecord {
                j,
                t,
                window_end,
                theta_hat: sel.theta,
                x_hat: sel.x_hat,
                cost: sel.cost,
                radius: set.radius,
            });
            j += 1;
            excite.start_interval(j, schedule.c_p(j));
            mpc.reset();
        }
        let fed = match cfg.feedback {
            Feedback::Nominal => &xbar,
            Feedback::Observation => &y,
        };
        let plan: QPSolution = mpc.plan(t, fed, &model, Some(window_end)).map_err(|e| e.at_step(t))?;
        stats.record(&plan);
        let u = plan.inputs[0].clone();
        let next_bar = propagate_nominal(&model, &xbar, &u);
        let (delta_u, case) = if cfg.perturb {
            let p = perturb(&excite, &u);
            (p.delta, Some(p.case))
        } else {
            (DVector::zeros(m), None)
        };
        let u_bar = &u + &delta_u;
        excite.record(&u_bar);
        let mut z = DVector::zeros(n + m);
        z.rows_mut(0, n).copy_from(&x);
        z.rows_mut(n, m).copy_from(&u_bar);
        zs.push(z);
        us.push(u_bar.clone());
        models.push(model.theta());
        steps.push(StepRecord {
            t,
            x: x.clone(),
            y,
            x_nominal: xbar.clone(),
            u,
            delta_u,
            stage_cost: ep.cost.eval(t, &x, &u_bar),
            violation: ep.constraints.violation(&u_bar),
            u_bar: u_bar.clone(),
            perturb_case: case,
            interval: j,
        });
        x = step(ep.sys, &x, &u_bar).map_err(|e| e.at_step(t))?;
        xbar = next_bar;
    }
    // the last interval closes on the observation after the final input
    ys.push(observe(&x, &mut noise));
    let b = close_interval(ep, cfg, &schedule, phi, j, &ys, &us, &zs).map_err(|e| e.at_step(big_t + 1))?;
    boundaries.push(b.record);

    let fits: Vec<DMatrix<f64>> = boundaries.iter().map(|b| b.theta_star.clone()).collect();
    let (_, anchor) = episode_anchor(&fits, phi).expect("at least one boundary");
    Ok(EpisodeTrace {
        schedule,
        steps,
        selections,
        boundaries,
        models,
        stats,
        anchor,
        phi: phi.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeMetrics {
    pub regret: f64,
    pub policy_cost: f64,
    pub baseline_cost: f64,
    /// Cumulative constraint violation `𝒱`.
    pub violation: f64,
    pub max_step_violation: f64,
    /// `Σ_{t<T} ‖θ̃_t − θ‖_F`.
    pub e_theta: f64,
}

pub fn episode_metrics(trace: &EpisodeTrace, baseline: &QPSolution, sys: &SystemParams) -> EpisodeMetrics {
    let policy_cost = trace.policy_cost();
    let theta = sys.theta();
    let horizon = trace.models.len();
    let e_theta = trace.models[..horizon.saturating_sub(1)]
        .iter()
        .map(|th| (th - &theta).norm())
        .sum();
    EpisodeMetrics {
        regret: policy_cost - baseline.objective,
        policy_cost,
        baseline_cost: baseline.objective,
        violation: trace.steps.iter().map(|s| s.violation).sum(),
        max_step_violation: trace.steps.iter().map(|s| s.violation).fold(0.0, f64::max),
        e_theta,
    }
}

/// `Σ_j √c_{p,j} H_j` over the intervals of a schedule, with clipped lengths.
pub fn violation_scale(schedule: &IntervalSchedule) -> f64 {
    (1..=schedule.count())
        .map(|j| {
            let len = schedule.end(j) + 1 - schedule.start(j);
            schedule.c_p(j).sqrt() * len as f64
        })
        .sum()
}
