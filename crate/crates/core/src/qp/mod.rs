//! Finite-horizon constrained LQ problems.
//!
//! The decision variables are the inputs `w_0..w_{M-1}` (and optionally the
//! initial state); states follow `x_{k+1} = A x_k + B w_k`. The objective is
//! `sum_k c_{t0+k}(x_k, w_k)`, the terminal state is not charged. Problems are
//! solved by a primal active-set method whose equality-constrained subproblems
//! go either to a condensed dense factorization (short horizons) or to a
//! stage-wise Riccati recursion (long horizons).

mod active_set;
mod cost;
mod dense;
mod polytope;
mod reference;
mod structured;

use nalgebra::{DMatrix, DVector};

pub use cost::QuadCostSpec;
pub use polytope::InputPolytope;
pub use reference::{riccati_reference, RiccatiSolution};

use crate::error::{Error, Result};
use crate::linsys::SystemParams;

/// Regularization added to every `R_t` when some stage has singular `R_t`.
pub const R_REGULARIZATION: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    Fixed(DVector<f64>),
    /// The initial state is a decision variable without constraints.
    Free,
}

#[derive(Clone, Debug)]
pub struct HorizonProblem<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    pub x0: InitialState,
    pub horizon: usize,
    /// Absolute time of stage 0, used to index the cost.
    pub t0: usize,
    pub cost: &'a QuadCostSpec,
    pub constraints: &'a InputPolytope,
}

impl<'a> HorizonProblem<'a> {
    pub fn new(
        model: &'a SystemParams,
        x0: InitialState,
        horizon: usize,
        t0: usize,
        cost: &'a QuadCostSpec,
        constraints: &'a InputPolytope,
    ) -> Self {
        HorizonProblem {
            a: model.a(),
            b: model.b(),
            x0,
            horizon,
            t0,
            cost,
            constraints,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.horizon == 0 {
            return Err(Error::invalid("horizon", "must be at least 1"));
        }
        if self.a.ncols() != n {
            return Err(Error::dims("A columns", n, self.a.ncols()));
        }
        if self.b.nrows() != n {
            return Err(Error::dims("B rows", n, self.b.nrows()));
        }
        if self.cost.n() != n {
            return Err(Error::dims("cost state dim", n, self.cost.n()));
        }
        if self.cost.m() != m {
            return Err(Error::dims("cost input dim", m, self.cost.m()));
        }
        if self.constraints.m() != m {
            return Err(Error::dims("polytope input dim", m, self.constraints.m()));
        }
        if let InitialState::Fixed(x) = &self.x0 {
            if x.len() != n {
                return Err(Error::dims("initial state", n, x.len()));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("initial state is not finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Backend {
    /// Dense for at most `dense_limit` decision variables, structured otherwise.
    #[default]
    Auto,
    Dense,
    Structured,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub backend: Backend,
    pub dense_limit: usize,
    /// Defaults to a multiple of the problem size.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_kkt: 1e-8,
            tol_feas: 1e-9,
            backend: Backend::Auto,
            dense_limit: 64,
            max_iter: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    /// KKT certificate passed at the requested tolerances.
    Optimal,
    /// Converged but the certificate missed a tolerance; residuals are reported.
    Unverified,
}

#[derive(Clone, Debug)]
pub struct QPSolution {
    pub inputs: Vec<DVector<f64>>,
    /// `x_0..x_M`, including the uncharged terminal state.
    pub states: Vec<DVector<f64>>,
    pub objective: f64,
    /// Max of stationarity, dual infeasibility and complementarity.
    pub kkt_residual: f64,
    pub feas_residual: f64,
    /// One multiplier vector per stage, zero on inactive rows.
    pub multipliers: Vec<DVector<f64>>,
    pub status: Status,
    pub iterations: usize,
    /// Diagonal added to `R_t` (0 when every `R_t` is definite).
    pub regularization: f64,
    pub backend: Backend,
}

impl QPSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.states[0]
    }
}

/// Running tally of solver outcomes, for auditing certificates across a run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub solves: usize,
    pub optimal: usize,
    /// Largest residuals over solves marked optimal.
    pub max_kkt: f64,
    pub max_feas: f64,
}

impl SolveStats {
    pub fn record(&mut self, sol: &QPSolution) {
        self.solves += 1;
        if sol.is_optimal() {
            self.optimal += 1;
            self.max_kkt = self.max_kkt.max(sol.kkt_residual);
            self.max_feas = self.max_feas.max(sol.feas_residual);
        }
    }

    pub fn merge(&mut self, other: &SolveStats) {
        self.solves += other.solves;
        self.optimal += other.optimal;
        self.max_kkt = self.max_kkt.max(other.max_kkt);
        self.max_feas = self.max_feas.max(other.max_feas);
    }
}

pub fn solve_horizon(p: &HorizonProblem, opts: &SolverOptions) -> Result<QPSolution> {
    active_set::solve(p, opts, None)
}

/// As [`solve_horizon`], starting from `warm` where it is feasible.
pub fn solve_horizon_warm(
    p: &HorizonProblem,
    opts: &SolverOptions,
    warm: Option<&[DVector<f64>]>,
) -> Result<QPSolution> {
    active_set::solve(p, opts, warm)
}

/// Best constrained open-loop plan for the true plant over the whole episode,
/// with stage 0 at time 1.
pub fn solve_full_horizon_baseline(
    sys: &SystemParams,
    cost: &QuadCostSpec,
    constraints: &InputPolytope,
    horizon: usize,
    x_s: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<QPSolution> {
    let p = HorizonProblem::new(sys, InitialState::Fixed(x_s.clone()), horizon, 1, cost, constraints);
    solve_horizon(&p, opts)
}

/// Horizon cost of an input sequence from a fixed initial state.
pub fn horizon_cost(p: &HorizonProblem, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> f64 {
    let mut x = x0.clone();
    let mut total = 0.0;
    for (k, w) in inputs.iter().enumerate() {
        total += p.cost.eval(p.t0 + k, &x, w);
        x = p.a * &x + p.b * w;
    }
    total
}

#[cfg(test)]
mod tests;
