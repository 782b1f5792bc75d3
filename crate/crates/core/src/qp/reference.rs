use nalgebra::{DMatrix, DVector};

use super::QuadCostSpec;
use crate::linsys::SystemParams;

#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub inputs: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    /// Cost-to-go matrices `P_0..P_T`.
    pub p: Vec<DMatrix<f64>>,
    /// Stage costs plus `x_T' P_T x_T`.
    pub cost: f64,
}

/// Unconstrained finite-horizon LQ by backward dynamic programming.
///
/// `terminal` sets `P_T`; without it the terminal state is free of charge.
pub fn riccati_reference(
    sys: &SystemParams,
    cost: &QuadCostSpec,
    horizon: usize,
    t0: usize,
    x_s: &DVector<f64>,
    terminal: Option<&DMatrix<f64>>,
) -> RiccatiSolution {
    let (a, b) = (sys.a(), sys.b());
    let n = sys.n();
    let pt = terminal.cloned().unwrap_or_else(|| DMatrix::zeros(n, n));
    let mut p = vec![pt.clone(); horizon + 1];
    let mut gains = vec![DMatrix::zeros(sys.m(), n); horizon];
    for k in (0..horizon).rev() {
        let (q, r) = cost.stage(t0 + k);
        let pn = &p[k + 1];
        let btp = b.transpose() * pn;
        let s = r + &btp * b;
        let s_pinv = s.pseudo_inverse(1e-14).expect("pseudo-inverse of a finite matrix");
        let kk = &s_pinv * (&btp * a);
        let next = q + a.transpose() * pn * a - a.transpose() * pn * b * &kk;
        p[k] = (&next + next.transpose()) * 0.5;
        gains[k] = kk;
    }
    let mut states = vec![x_s.clone()];
    let mut inputs = Vec::with_capacity(horizon);
    let mut total = 0.0;
    for k in 0..horizon {
        let x = &states[k];
        let u = -(&gains[k] * x);
        total += cost.eval(t0 + k, x, &u);
        states.push(a * x + b * &u);
        inputs.push(u);
    }
    let xt = &states[horizon];
    total += xt.dot(&(&pt * xt));
    RiccatiSolution {
        inputs,
        states,
        gains,
        p,
        cost: total,
    }
}
