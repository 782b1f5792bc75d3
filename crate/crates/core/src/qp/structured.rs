//! Stage-wise subproblem: working rows are eliminated per stage through a null
//! space basis and the remaining affine LQ problem is solved by a backward
//! Riccati sweep, linear in the horizon.

use nalgebra::{DMatrix, DVector};

use super::active_set::{rows_of, Eqp, Iterate, Stages, WorkingSet};
use crate::error::{Error, Result};

pub(super) struct StructuredEqp;

/// Orthonormal basis of `{v : F_W v = 0}` and a particular correction
/// `F_W^+ r` restoring the working rows to equality.
fn stage_basis(f: &DMatrix<f64>, rows: &[usize], m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    if rows.is_empty() {
        return (DMatrix::identity(m, m), DMatrix::zeros(m, 0));
    }
    let fw = rows_of(f, rows);
    let eig = fw.tr_mul(&fw).symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let d = m.saturating_sub(rows.len());
    let mut basis = DMatrix::zeros(m, d);
    for (c, &i) in order.iter().take(d).enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(i));
    }
    let pinv = fw.transpose()
        * (&fw * fw.transpose())
            .try_inverse()
            .unwrap_or_else(|| DMatrix::zeros(rows.len(), rows.len()));
    (basis, pinv)
}

impl Eqp for StructuredEqp {
    fn solve(&mut self, st: &Stages, it: &Iterate, ws: &WorkingSet) -> Result<Iterate> {
        let (n, m, horizon) = (st.n(), st.m(), st.horizon());
        let a = st.a;
        let at = a.transpose();
        let mut gains: Vec<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> = Vec::with_capacity(horizon);
        let mut wbase = Vec::with_capacity(horizon);
        let mut p = DMatrix::<f64>::zeros(n, n);
        let mut s = DVector::<f64>::zeros(n);
        for k in (0..horizon).rev() {
            let (basis, pinv) = stage_basis(st.f, &ws[k], m);
            let mut wk = it.w[k].clone();
            if !ws[k].is_empty() {
                let r = DVector::from_iterator(
                    ws[k].len(),
                    ws[k].iter().map(|&i| st.bu[i] - st.f.row(i).dot(&wk.transpose())),
                );
                wk += &pinv * r;
            }
            let c = st.b * &wk;
            let pc_s = &p * &c + &s;
            let pa = &p * a;
            let d = basis.ncols();
            let (gain, ff) = if d > 0 {
                let bh = st.b * &basis;
                let bh_t = bh.transpose();
                let g = basis.tr_mul(&(&st.r[k] * &basis)) + &bh_t * (&p * &bh);
                let chol = g
                    .cholesky()
                    .ok_or_else(|| Error::Numerical(format!("reduced Hessian not definite at stage {k}")))?;
                let bpa = &bh_t * &pa;
                let h0 = basis.tr_mul(&(&st.r[k] * &wk)) + &bh_t * &pc_s;
                let gain = chol.solve(&bpa);
                let ff = chol.solve(&h0);
                let pn = &st.q[k] + &at * &pa - bpa.tr_mul(&gain);
                s = &at * &pc_s - gain.tr_mul(&h0);
                p = (&pn + pn.transpose()) * 0.5;
                (gain, ff)
            } else {
                let pn = &st.q[k] + &at * &pa;
                s = &at * &pc_s;
                p = (&pn + pn.transpose()) * 0.5;
                (DMatrix::zeros(0, n), DVector::zeros(0))
            };
            gains.push((gain, ff, basis));
            wbase.push(wk);
        }
        gains.reverse();
        wbase.reverse();

        let x0 = match &st.x0 {
            Some(x) => x.clone(),
            None => p
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("initial cost-to-go not definite".into()))?
                .solve(&(-&s)),
        };
        let mut x = x0.clone();
        let mut w = Vec::with_capacity(horizon);
        for ((gain, ff, basis), wk) in gains.iter().zip(wbase) {
            let wnew = if basis.ncols() > 0 {
                let v = -(gain * &x) - ff;
                wk + basis * v
            } else {
                wk
            };
            x = a * &x + st.b * &wnew;
            w.push(wnew);
        }
        Ok(Iterate { x0, w })
    }
}
