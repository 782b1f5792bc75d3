//! Primal active-set loop shared by both subproblem backends.

use nalgebra::{DMatrix, DVector};

use super::dense::DenseEqp;
use super::structured::StructuredEqp;
use super::{Backend, HorizonProblem, InitialState, QPSolution, SolverOptions, Status, R_REGULARIZATION};
use crate::error::{Error, Result};

/// Per-stage data with regularization applied.
pub(super) struct Stages<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub x0: Option<DVector<f64>>,
    pub f: &'a DMatrix<f64>,
    pub bu: &'a DVector<f64>,
    pub reg: f64,
}

impl<'a> Stages<'a> {
    fn new(p: &HorizonProblem<'a>) -> Self {
        let reg = if p.cost.has_singular_r() { R_REGULARIZATION } else { 0.0 };
        let m = p.m();
        let mut q = Vec::with_capacity(p.horizon);
        let mut r = Vec::with_capacity(p.horizon);
        for k in 0..p.horizon {
            let (qk, rk) = p.cost.stage(p.t0 + k);
            q.push(qk.clone());
            let mut rk = rk.clone();
            if reg > 0.0 {
                for i in 0..m {
                    rk[(i, i)] += reg;
                }
            }
            r.push(rk);
        }
        let x0 = match &p.x0 {
            InitialState::Fixed(x) => Some(x.clone()),
            InitialState::Free => None,
        };
        Stages {
            a: p.a,
            b: p.b,
            q,
            r,
            x0,
            f: p.constraints.f(),
            bu: p.constraints.b(),
            reg,
        }
    }

    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn rollout(&self, it: &Iterate) -> Vec<DVector<f64>> {
        let mut xs = Vec::with_capacity(self.horizon() + 1);
        xs.push(it.x0.clone());
        for w in &it.w {
            let x = xs.last().unwrap();
            xs.push(self.a * x + self.b * w);
        }
        xs
    }

    /// Gradient of the (regularized) objective by the adjoint recursion.
    pub fn gradient(&self, xs: &[DVector<f64>], w: &[DVector<f64>]) -> (DVector<f64>, Vec<DVector<f64>>) {
        let mut lam = DVector::zeros(self.n());
        let mut gw = vec![DVector::zeros(self.m()); self.horizon()];
        for k in (0..self.horizon()).rev() {
            gw[k] = (&self.r[k] * &w[k]) * 2.0 + self.b.tr_mul(&lam);
            lam = (&self.q[k] * &xs[k]) * 2.0 + self.a.tr_mul(&lam);
        }
        (lam, gw)
    }
}

#[derive(Clone, Debug)]
pub(super) struct Iterate {
    pub x0: DVector<f64>,
    pub w: Vec<DVector<f64>>,
}

/// Row indices held at equality, per stage.
pub(super) type WorkingSet = Vec<Vec<usize>>;

pub(super) trait Eqp {
    /// Minimizer of the objective with the working rows at equality.
    fn solve(&mut self, st: &Stages, it: &Iterate, ws: &WorkingSet) -> Result<Iterate>;
}

pub(super) fn rows_of(f: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), f.ncols(), |i, j| f[(rows[i], j)])
}

fn is_independent(f: &DMatrix<f64>, rows: &[usize], cand: usize) -> bool {
    let fc = f.row(cand).transpose();
    if rows.is_empty() {
        return true;
    }
    let fw = rows_of(f, rows);
    // residual of projecting the candidate row onto the span of the working rows
    let gram = &fw * fw.transpose();
    let coef = match gram.cholesky() {
        Some(c) => c.solve(&(&fw * &fc)),
        None => return false,
    };
    let resid = &fc - fw.tr_mul(&coef);
    resid.norm() > 1e-8 * fc.norm()
}

/// Stage multipliers from `F_W' mu = -grad` in the least-squares sense.
fn stage_multipliers(f: &DMatrix<f64>, rows: &[usize], g: &DVector<f64>) -> DVector<f64> {
    if rows.is_empty() {
        return DVector::zeros(0);
    }
    let fw = rows_of(f, rows);
    let gram = &fw * fw.transpose();
    match gram.clone().cholesky() {
        Some(c) => -c.solve(&(&fw * g)),
        None => {
            let svd = fw.transpose().svd(true, true);
            -svd.solve(g, 1e-14).unwrap_or_else(|_| DVector::zeros(rows.len()))
        }
    }
}

struct Certificate {
    kkt: f64,
    feas: f64,
    multipliers: Vec<DVector<f64>>,
    min_mu: Option<(usize, usize, f64)>,
}

fn certify(st: &Stages, it: &Iterate, ws: &WorkingSet) -> Certificate {
    let xs = st.rollout(it);
    let (gx0, gw) = st.gradient(&xs, &it.w);
    let p = st.f.nrows();
    let mut stat: f64 = if st.x0.is_none() { gx0.amax() } else { 0.0 };
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut feas: f64 = 0.0;
    let mut min_mu: Option<(usize, usize, f64)> = None;
    let mut multipliers = Vec::with_capacity(st.horizon());
    for k in 0..st.horizon() {
        let slack = st.bu - st.f * &it.w[k];
        feas = feas.max(slack.iter().map(|&s| (-s).max(0.0)).fold(0.0, f64::max));
        let mu = stage_multipliers(st.f, &ws[k], &gw[k]);
        let mut full = DVector::zeros(p);
        let mut resid = gw[k].clone();
        for (pos, &row) in ws[k].iter().enumerate() {
            full[row] = mu[pos];
            resid += st.f.row(row).transpose() * mu[pos];
            dual = dual.max(-mu[pos]);
            comp = comp.max((mu[pos] * slack[row]).abs());
            if min_mu.map_or(true, |(_, _, v)| mu[pos] < v) {
                min_mu = Some((k, pos, mu[pos]));
            }
        }
        stat = stat.max(resid.amax());
        multipliers.push(full);
    }
    Certificate {
        kkt: stat.max(dual).max(comp),
        feas,
        multipliers,
        min_mu,
    }
}

fn initial_iterate(st: &Stages, center: &DVector<f64>, warm: Option<&[DVector<f64>]>, tol_feas: f64) -> Iterate {
    let m = st.m();
    let w = (0..st.horizon())
        .map(|k| match warm.and_then(|w| w.get(k)) {
            Some(u) if u.len() == m && u.iter().all(|v| v.is_finite()) => {
                let slack = st.bu - st.f * u;
                if slack.iter().all(|&s| s >= -tol_feas) {
                    u.clone()
                } else {
                    center.clone()
                }
            }
            _ => center.clone(),
        })
        .collect();
    let x0 = st.x0.clone().unwrap_or_else(|| DVector::zeros(st.n()));
    Iterate { x0, w }
}

fn initial_working_set(st: &Stages, it: &Iterate) -> WorkingSet {
    let p = st.f.nrows();
    it.w
        .iter()
        .map(|w| {
            let slack = st.bu - st.f * w;
            let mut rows = Vec::new();
            for i in 0..p {
                if slack[i].abs() <= 1e-12 * (1.0 + st.bu[i].abs()) && rows.len() < st.m() && is_independent(st.f, &rows, i) {
                    rows.push(i);
                }
            }
            rows
        })
        .collect()
}

pub(super) fn solve(p: &HorizonProblem, opts: &SolverOptions, warm: Option<&[DVector<f64>]>) -> Result<QPSolution> {
    p.validate()?;
    let st = Stages::new(p);
    let nz = st.horizon() * st.m() + if st.x0.is_none() { st.n() } else { 0 };
    let backend = match opts.backend {
        Backend::Auto if nz <= opts.dense_limit => Backend::Dense,
        Backend::Auto => Backend::Structured,
        b => b,
    };
    let mut eqp: Box<dyn Eqp> = match backend {
        Backend::Dense => Box::new(DenseEqp::new(&st)?),
        _ => Box::new(StructuredEqp),
    };
    let rows = st.f.nrows();
    let max_iter = opts
        .max_iter
        .unwrap_or(10 * (nz + st.horizon() * rows) + 100);
    let drop_tol = -0.1 * opts.tol_kkt;

    let mut it = initial_iterate(&st, p.constraints.chebyshev_center(), warm, opts.tol_feas);
    let mut ws = initial_working_set(&st, &it);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let target = eqp.solve(&st, &it, &ws)?;
        // ratio test against rows outside the working set
        let mut alpha = 1.0;
        let mut blocking = None;
        for k in 0..st.horizon() {
            let step = &target.w[k] - &it.w[k];
            let fp = st.f * &step;
            let fw = st.f * &it.w[k];
            for i in 0..rows {
                if ws[k].contains(&i) || fp[i] <= 1e-14 * (1.0 + step.amax()) {
                    continue;
                }
                let slack = (st.bu[i] - fw[i]).max(0.0);
                let a = slack / fp[i];
                if a < alpha {
                    alpha = a;
                    blocking = Some((k, i));
                }
            }
        }
        if let Some((k, i)) = blocking {
            it.x0 = &it.x0 + (&target.x0 - &it.x0) * alpha;
            for (w, tw) in it.w.iter_mut().zip(&target.w) {
                *w += (tw - &*w) * alpha;
            }
            if is_independent(st.f, &ws[k], i) {
                ws[k].push(i);
            }
            continue;
        }
        it = target;
        let cert = certify(&st, &it, &ws);
        match cert.min_mu {
            Some((k, pos, v)) if v < drop_tol => {
                ws[k].remove(pos);
            }
            _ => {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::IterationLimit(iterations));
    }

    let mut cert = certify(&st, &it, &ws);
    // a couple of refinement passes on the final working set
    for _ in 0..2 {
        if cert.kkt <= opts.tol_kkt && cert.feas <= opts.tol_feas {
            break;
        }
        let refined = eqp.solve(&st, &it, &ws)?;
        let rc = certify(&st, &refined, &ws);
        if rc.kkt.max(rc.feas) < cert.kkt.max(cert.feas) {
            it = refined;
            cert = rc;
        } else {
            break;
        }
    }

    let states = st.rollout(&it);
    let objective = states
        .iter()
        .zip(&it.w)
        .enumerate()
        .map(|(k, (x, w))| p.cost.eval(p.t0 + k, x, w))
        .sum();
    let status = if cert.kkt <= opts.tol_kkt && cert.feas <= opts.tol_feas {
        Status::Optimal
    } else {
        log::debug!(
            "qp certificate missed tolerance: kkt {:e} feas {:e} (horizon {})",
            cert.kkt,
            cert.feas,
            st.horizon()
        );
        Status::Unverified
    };
    Ok(QPSolution {
        inputs: it.w,
        states,
        objective,
        kkt_residual: cert.kkt,
        feas_residual: cert.feas,
        multipliers: cert.multipliers,
        status,
        iterations,
        regularization: st.reg,
        backend,
    })
}
