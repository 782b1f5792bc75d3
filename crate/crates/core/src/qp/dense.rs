//! Condensed subproblem: states eliminated, Hessian factored once per solve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::active_set::{Eqp, Iterate, Stages, WorkingSet};
use crate::error::{Error, Result};

pub(super) struct DenseEqp {
    nx: usize,
    h: DMatrix<f64>,
    g: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl DenseEqp {
    pub fn new(st: &Stages) -> Result<Self> {
        let (n, m, horizon) = (st.n(), st.m(), st.horizon());
        let nx = if st.x0.is_none() { n } else { 0 };
        let nz = nx + horizon * m;
        let mut h = DMatrix::zeros(nz, nz);
        let mut g = DVector::zeros(nz);
        // E_k maps z to x_k; xc_k is the part fixed by a given x0
        let mut e = DMatrix::zeros(n, nz);
        if nx > 0 {
            e.view_mut((0, 0), (n, n)).fill_with_identity();
        }
        let mut xc = st.x0.clone().unwrap_or_else(|| DVector::zeros(n));
        for k in 0..horizon {
            let qe = &st.q[k] * &e;
            h += e.tr_mul(&qe) * 2.0;
            g += e.tr_mul(&(&st.q[k] * &xc)) * 2.0;
            let off = nx + k * m;
            let mut hb = h.view_mut((off, off), (m, m));
            hb += &st.r[k] * 2.0;
            e = st.a * &e;
            e.view_mut((0, off), (n, m)).copy_from(st.b);
            xc = st.a * &xc;
        }
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("condensed Hessian is not positive definite".into()))?;
        Ok(DenseEqp { nx, h, g, chol })
    }

    fn pack(&self, it: &Iterate) -> DVector<f64> {
        let m = it.w.first().map_or(0, |w| w.len());
        let mut z = DVector::zeros(self.g.len());
        if self.nx > 0 {
            z.rows_mut(0, self.nx).copy_from(&it.x0);
        }
        for (k, w) in it.w.iter().enumerate() {
            z.rows_mut(self.nx + k * m, m).copy_from(w);
        }
        z
    }
}

impl Eqp for DenseEqp {
    fn solve(&mut self, st: &Stages, it: &Iterate, ws: &WorkingSet) -> Result<Iterate> {
        let m = st.m();
        let nz = self.g.len();
        let z = self.pack(it);
        let grad = &self.h * &z + &self.g;
        let count: usize = ws.iter().map(|r| r.len()).sum();
        let l = self.chol.l();
        let t = l
            .solve_lower_triangular(&grad)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let step = if count == 0 {
            -&t
        } else {
            let mut c = DMatrix::zeros(count, nz);
            let mut resid = DVector::zeros(count);
            let mut row = 0;
            for (k, rows) in ws.iter().enumerate() {
                for &i in rows {
                    let fi = st.f.row(i);
                    c.view_mut((row, self.nx + k * m), (1, m)).copy_from(&fi);
                    resid[row] = st.bu[i] - fi.dot(&it.w[k].transpose());
                    row += 1;
                }
            }
            let y = l
                .solve_lower_triangular(&c.transpose())
                .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
            let qr = y.clone().qr();
            let r1 = qr.r();
            // R1' R1 mu = -resid - Y' t
            let rhs = -resid - y.tr_mul(&t);
            let tmp = r1
                .transpose()
                .solve_lower_triangular(&rhs)
                .ok_or_else(|| Error::Numerical("working-set rows are dependent".into()))?;
            let mu = r1
                .solve_upper_triangular(&tmp)
                .ok_or_else(|| Error::Numerical("working-set rows are dependent".into()))?;
            -(t + y * mu)
        };
        let p = l
            .transpose()
            .solve_upper_triangular(&step)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let znew = z + p;
        let x0 = if self.nx > 0 {
            znew.rows(0, self.nx).into_owned()
        } else {
            it.x0.clone()
        };
        let w = (0..st.horizon())
            .map(|k| znew.rows(self.nx + k * m, m).into_owned())
            .collect();
        Ok(Iterate { x0, w })
    }
}
