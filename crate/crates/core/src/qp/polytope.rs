use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Input constraint set `{u : F u <= b}`, checked bounded with nonempty interior.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPolytope {
    f: DMatrix<f64>,
    b: DVector<f64>,
    center: DVector<f64>,
    radius: f64,
}

impl InputPolytope {
    pub fn new(f: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if f.nrows() != b.len() {
            return Err(Error::dims("polytope rows", f.nrows(), b.len()));
        }
        if f.ncols() == 0 || f.nrows() == 0 {
            return Err(Error::invalid("F_u", "must be nonempty"));
        }
        if f.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("F_u", "entries must be finite"));
        }
        for i in 0..f.nrows() {
            if f.row(i).norm() == 0.0 {
                return Err(Error::invalid("F_u", format!("row {i} is zero")));
            }
        }
        let (center, radius) = chebyshev_center(&f, &b)?;
        if !(radius > 1e-12) {
            return Err(Error::invalid("F_u", "polytope has empty interior"));
        }
        check_bounded(&f, &b)?;
        Ok(InputPolytope { f, b, center, radius })
    }

    /// Box `lo <= u <= hi`, componentwise.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dims("box bounds", lo.len(), hi.len()));
        }
        let m = lo.len();
        let mut f = DMatrix::zeros(2 * m, m);
        let mut b = DVector::zeros(2 * m);
        for k in 0..m {
            f[(2 * k, k)] = 1.0;
            b[2 * k] = hi[k];
            f[(2 * k + 1, k)] = -1.0;
            b[2 * k + 1] = -lo[k];
        }
        Self::new(f, b)
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn m(&self) -> usize {
        self.f.ncols()
    }

    pub fn rows(&self) -> usize {
        self.f.nrows()
    }

    pub fn chebyshev_center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn chebyshev_radius(&self) -> f64 {
        self.radius
    }

    /// `b_i - F_i u`; negative entries are violated rows.
    pub fn slack(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.f * u
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.slack(u).iter().all(|&s| s >= -tol)
    }

    /// Sum of positive parts of `F u - b`.
    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        self.slack(u).iter().map(|&s| (-s).max(0.0)).sum()
    }

    /// Largest absolute row sum of `F`.
    pub fn f_inf_norm(&self) -> f64 {
        (0..self.f.nrows())
            .map(|i| self.f.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// True when `self` is contained in `other` (checked by LP on each of `other`'s rows).
    pub fn is_subset_of(&self, other: &InputPolytope) -> bool {
        (0..other.rows()).all(|i| {
            let dir = other.f.row(i).transpose();
            match lp_extreme(&self.f, &self.b, &dir) {
                Some(v) => v <= other.b[i] + 1e-9,
                None => false,
            }
        })
    }
}

fn chebyshev_center(f: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let m = f.ncols();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let c: Vec<_> = (0..m)
        .map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    let r = lp.add_var(1.0, (0.0, f64::INFINITY));
    for i in 0..f.nrows() {
        let mut terms: Vec<_> = (0..m).map(|k| (c[k], f[(i, k)])).collect();
        terms.push((r, f.row(i).norm()));
        lp.add_constraint(terms, ComparisonOp::Le, b[i]);
    }
    match lp.solve() {
        Ok(sol) => {
            let center = DVector::from_iterator(m, c.iter().map(|&v| sol[v]));
            // the LP backend reports some unbounded problems as infinite optima
            if !sol[r].is_finite() || center.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("F_u", "polytope is unbounded"));
            }
            Ok((center, sol[r]))
        }
        Err(minilp::Error::Infeasible) => Err(Error::invalid("F_u", "polytope is empty")),
        Err(minilp::Error::Unbounded) => Err(Error::invalid("F_u", "polytope is unbounded")),
    }
}

fn check_bounded(f: &DMatrix<f64>, b: &DVector<f64>) -> Result<()> {
    let m = f.ncols();
    for k in 0..m {
        for sign in [1.0, -1.0] {
            let mut dir = DVector::zeros(m);
            dir[k] = sign;
            if lp_extreme(f, b, &dir).is_none() {
                return Err(Error::invalid(
                    "F_u",
                    format!("polytope is unbounded along {}e_{}", if sign > 0.0 { "+" } else { "-" }, k + 1),
                ));
            }
        }
    }
    Ok(())
}

/// `max dir'u` over the polytope, `None` if unbounded or empty.
fn lp_extreme(f: &DMatrix<f64>, b: &DVector<f64>, dir: &DVector<f64>) -> Option<f64> {
    let m = f.ncols();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let u: Vec<_> = (0..m)
        .map(|k| lp.add_var(dir[k], (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    for i in 0..f.nrows() {
        let terms: Vec<_> = (0..m).map(|k| (u[k], f[(i, k)])).collect();
        lp.add_constraint(terms, ComparisonOp::Le, b[i]);
    }
    lp.solve().ok().map(|s| s.objective()).filter(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn box_center_and_norms() {
        let p = InputPolytope::from_box(&[-1.0, 0.0], &[1.0, 4.0]).unwrap();
        assert!((p.chebyshev_center()[0]).abs() < 1e-9);
        assert!((p.chebyshev_radius() - 1.0).abs() < 1e-9);
        assert_eq!(p.f_inf_norm(), 1.0);
        assert!(p.contains(&dvector![0.5, 3.0], 0.0));
        assert_eq!(p.violation(&dvector![2.0, -1.0]), 2.0);
    }

    #[test]
    fn unit_box_violation_example() {
        let p = InputPolytope::from_box(&[-1.0], &[1.0]).unwrap();
        assert_eq!(p.violation(&dvector![2.0]), 1.0);
        assert_eq!(p.violation(&dvector![0.3]), 0.0);
    }

    #[test]
    fn rejects_unbounded_and_empty() {
        // half-line u >= 0
        assert!(InputPolytope::new(dmatrix![-1.0], dvector![0.0]).is_err());
        // u <= -1 and u >= 1
        assert!(InputPolytope::new(dmatrix![1.0; -1.0], dvector![-1.0, -1.0]).is_err());
        // flat: u = 0
        assert!(InputPolytope::from_box(&[0.0], &[0.0]).is_err());
        // strip in 2D, bounded only along the first axis
        assert!(InputPolytope::new(dmatrix![1.0, 0.0; -1.0, 0.0], dvector![1.0, 1.0]).is_err());
    }

    #[test]
    fn simplex_subset() {
        let tri = InputPolytope::new(dmatrix![-1.0, 0.0; 0.0, -1.0; 1.0, 1.0], dvector![0.0, 0.0, 1.0]).unwrap();
        let bx = InputPolytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert!(tri.is_subset_of(&bx));
        assert!(!bx.is_subset_of(&tri));
        assert!(tri.contains(tri.chebyshev_center(), 0.0));
    }
}
