use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SYM_TOL: f64 = 1e-10;

/// Time-varying quadratic stage cost `c_t(x, u) = x'Q_t x + u'R_t u`.
///
/// Stages are indexed by the absolute time `t` and repeat with period
/// `stages.len()`; a single stage gives a time-invariant cost.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadCostSpec {
    stages: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    r_singular: bool,
}

impl QuadCostSpec {
    pub fn constant(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        Self::periodic(vec![(q, r)])
    }

    pub fn periodic(stages: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> Result<Self> {
        let Some((q0, r0)) = stages.first() else {
            return Err(Error::invalid("cost", "needs at least one stage"));
        };
        let (n, m) = (q0.nrows(), r0.nrows());
        let mut r_singular = false;
        for (q, r) in &stages {
            if q.shape() != (n, n) {
                return Err(Error::dims("Q_t", n, q.nrows()));
            }
            if r.shape() != (m, m) {
                return Err(Error::dims("R_t", m, r.nrows()));
            }
            check_symmetric("Q_t", q)?;
            check_symmetric("R_t", r)?;
            let qmin = q.clone().symmetric_eigenvalues().min();
            if !(qmin > 0.0) {
                return Err(Error::invalid("Q_t", format!("must be positive definite (min eigenvalue {qmin:e})")));
            }
            let rmin = r.clone().symmetric_eigenvalues().min();
            if rmin < -SYM_TOL * r.norm().max(1.0) {
                return Err(Error::invalid("R_t", format!("must be positive semidefinite (min eigenvalue {rmin:e})")));
            }
            if rmin <= 1e-12 {
                r_singular = true;
            }
        }
        Ok(QuadCostSpec { stages, r_singular })
    }

    pub fn n(&self) -> usize {
        self.stages[0].0.nrows()
    }

    pub fn m(&self) -> usize {
        self.stages[0].1.nrows()
    }

    pub fn period(&self) -> usize {
        self.stages.len()
    }

    /// `(Q_t, R_t)` at absolute time `t`.
    pub fn stage(&self, t: usize) -> (&DMatrix<f64>, &DMatrix<f64>) {
        let (q, r) = &self.stages[t % self.stages.len()];
        (q, r)
    }

    /// True when some `R_t` is only semidefinite.
    pub fn has_singular_r(&self) -> bool {
        self.r_singular
    }

    pub fn eval(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let (q, r) = self.stage(t);
        x.dot(&(q * x)) + u.dot(&(r * u))
    }

    /// Same stages multiplied by `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::invalid("scale", "must be positive"));
        }
        Self::periodic(self.stages.iter().map(|(q, r)| (q * s, r * s)).collect())
    }
}

fn check_symmetric(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    let asym = (m - m.transpose()).amax();
    if asym > SYM_TOL * m.amax().max(1.0) {
        return Err(Error::invalid(name, "must be symmetric"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn rejects_indefinite_q_and_negative_r() {
        assert!(QuadCostSpec::constant(dmatrix![0.0], dmatrix![1.0]).is_err());
        assert!(QuadCostSpec::constant(dmatrix![1.0], dmatrix![-0.5]).is_err());
        assert!(QuadCostSpec::constant(dmatrix![1.0, 2.0; 0.0, 1.0], dmatrix![1.0]).is_err());
        let c = QuadCostSpec::constant(dmatrix![1.0], dmatrix![0.0]).unwrap();
        assert!(c.has_singular_r());
    }

    #[test]
    fn periodic_indexing_and_eval() {
        let c = QuadCostSpec::periodic(vec![
            (dmatrix![1.0], dmatrix![1.0]),
            (dmatrix![2.0], dmatrix![0.5]),
        ])
        .unwrap();
        assert_eq!(c.eval(0, &dvector![1.0], &dvector![2.0]), 5.0);
        assert_eq!(c.eval(3, &dvector![1.0], &dvector![2.0]), 4.0);
    }
}
