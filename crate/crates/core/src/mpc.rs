//! Receding-horizon control on an estimated model.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linsys::SystemParams;
use crate::qp::{solve_horizon_warm, HorizonProblem, InitialState, InputPolytope, QPSolution, QuadCostSpec, SolverOptions};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpcConfig {
    /// Look-ahead `M`.
    pub horizon: usize,
    /// Stop the look-ahead at the end of the current interval, where cost preview ends.
    pub clamp_to_interval: bool,
    pub solver: SolverOptions,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 12,
            clamp_to_interval: true,
            solver: SolverOptions::default(),
        }
    }
}

impl MpcConfig {
    /// Number of stages optimized at time `t`.
    pub fn effective_horizon(&self, t: usize, interval_end: Option<usize>) -> usize {
        match interval_end {
            Some(end) if self.clamp_to_interval && end >= t => self.horizon.min(end - t + 1),
            _ => self.horizon,
        }
    }
}

/// One controller instance per episode; carries the warm-start cache.
#[derive(Clone, Debug)]
pub struct Mpc<'a> {
    cfg: MpcConfig,
    cost: &'a QuadCostSpec,
    constraints: &'a InputPolytope,
    warm: Option<Vec<DVector<f64>>>,
}

impl<'a> Mpc<'a> {
    pub fn new(cfg: MpcConfig, cost: &'a QuadCostSpec, constraints: &'a InputPolytope) -> Result<Self> {
        if cfg.horizon == 0 {
            return Err(Error::invalid("M", "must be at least 1"));
        }
        Ok(Mpc { cfg, cost, constraints, warm: None })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Solve the look-ahead problem from `x` at time `t` and return the full plan;
    /// the applied input is `plan.inputs[0]`.
    pub fn plan(&mut self, t: usize, x: &DVector<f64>, model: &SystemParams, interval_end: Option<usize>) -> Result<QPSolution> {
        let horizon = self.cfg.effective_horizon(t, interval_end);
        let p = HorizonProblem::new(model, InitialState::Fixed(x.clone()), horizon, t, self.cost, self.constraints);
        let sol = solve_horizon_warm(&p, &self.cfg.solver, self.warm.as_deref())?;
        let mut shifted: Vec<_> = sol.inputs.iter().skip(1).cloned().collect();
        if let Some(last) = sol.inputs.last() {
            shifted.push(last.clone());
        }
        self.warm = Some(shifted);
        Ok(sol)
    }

    pub fn step(&mut self, t: usize, x: &DVector<f64>, model: &SystemParams, interval_end: Option<usize>) -> Result<DVector<f64>> {
        Ok(self.plan(t, x, model, interval_end)?.inputs[0].clone())
    }
}

/// Stateless form of [`Mpc::step`].
pub fn mpc_step(
    t: usize,
    x: &DVector<f64>,
    model: &SystemParams,
    cost: &QuadCostSpec,
    constraints: &InputPolytope,
    cfg: &MpcConfig,
    interval_end: Option<usize>,
) -> Result<DVector<f64>> {
    Mpc::new(*cfg, cost, constraints)?.step(t, x, model, interval_end)
}

/// Advance the nominal state with the intermediate (unperturbed) input.
pub fn propagate_nominal(model: &SystemParams, xbar: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    model.a() * xbar + model.b() * u
}
