use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linsys::RANK_TOL;

/// Regressors `z_k = [y_k; u_k]` with targets `y_{k+1}`, one row per sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegressionData {
    rows: Vec<(DVector<f64>, DVector<f64>)>,
}

impl RegressionData {
    pub fn new() -> Self {
        RegressionData { rows: Vec::new() }
    }

    /// Samples `k = 1..count` from observation and applied-input histories
    /// (`ys[k-1] = y_k`, `us[k-1] = u_k`).
    pub fn from_history(ys: &[DVector<f64>], us: &[DVector<f64>], count: usize) -> Result<Self> {
        if ys.len() < count + 1 || us.len() < count {
            return Err(Error::dims("regression history", count + 1, ys.len().min(us.len() + 1)));
        }
        let mut data = RegressionData::new();
        for k in 0..count {
            data.push(&ys[k], &us[k], &ys[k + 1])?;
        }
        Ok(data)
    }

    pub fn push(&mut self, y: &DVector<f64>, u: &DVector<f64>, y_next: &DVector<f64>) -> Result<()> {
        if y.len() != y_next.len() {
            return Err(Error::dims("regression target", y.len(), y_next.len()));
        }
        if let Some((z, t)) = self.rows.first() {
            if z.len() != y.len() + u.len() {
                return Err(Error::dims("regressor", z.len(), y.len() + u.len()));
            }
            if t.len() != y_next.len() {
                return Err(Error::dims("regression target", t.len(), y_next.len()));
            }
        }
        if y.iter().chain(u.iter()).chain(y_next.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite regression sample".into()));
        }
        let mut z = DVector::zeros(y.len() + u.len());
        z.rows_mut(0, y.len()).copy_from(y);
        z.rows_mut(y.len(), u.len()).copy_from(u);
        self.rows.push((z, y_next.clone()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `t x (n+m)` regressor matrix.
    pub fn x(&self) -> DMatrix<f64> {
        let d = self.rows.first().map_or(0, |r| r.0.len());
        DMatrix::from_fn(self.len(), d, |i, j| self.rows[i].0[j])
    }

    /// `t x n` target matrix.
    pub fn y(&self) -> DMatrix<f64> {
        let n = self.rows.first().map_or(0, |r| r.1.len());
        DMatrix::from_fn(self.len(), n, |i, j| self.rows[i].1[j])
    }

    /// Sum of squared residuals `sum_k |y_{k+1} - theta z_k|^2`.
    pub fn residual(&self, theta: &DMatrix<f64>) -> f64 {
        self.rows.iter().map(|(z, t)| (t - theta * z).norm_squared()).sum()
    }
}

/// Ridge estimate shrunk toward `prior`:
/// `theta' = (X'X + lambda I)^{-1} X'(Y - X prior') + prior'`.
pub fn regularized_ls(data: &RegressionData, prior: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("regression data", "is empty"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", "must be nonnegative"));
    }
    let x = data.x();
    let y = data.y();
    let d = x.ncols();
    if prior.shape() != (y.ncols(), d) {
        return Err(Error::dims("prior columns", d, prior.ncols()));
    }
    let mut gram = x.tr_mul(&x);
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = x.tr_mul(&(&y - &x * prior.transpose()));
    match gram.clone().cholesky() {
        Some(c) => Ok((c.solve(&rhs) + prior.transpose()).transpose()),
        None if lambda == 0.0 => Err(Error::RankDeficient {
            rank: crate::linsys::numerical_rank(&x),
            dim: d,
        }),
        None => Err(Error::Numerical("regularized Gram matrix is not definite".into())),
    }
}

#[derive(Clone, Debug)]
pub struct LsFit {
    /// Minimum-norm least-squares solution.
    pub theta: DMatrix<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
    /// Unit regressor direction with (numerically) zero excitation, when rank deficient.
    pub null_direction: Option<DVector<f64>>,
    /// `sigma_max / sigma_min` of the regressor matrix (infinite when rank deficient).
    pub condition: f64,
}

/// Ordinary least squares via the SVD pseudo-inverse.
pub fn unregularized_ls(data: &RegressionData) -> Result<LsFit> {
    if data.is_empty() {
        return Err(Error::invalid("regression data", "is empty"));
    }
    let x = data.x();
    let y = data.y();
    let d = x.ncols();
    // pad to at least d rows so the SVD returns a full right basis
    let rows = x.nrows().max(d);
    let mut xp = DMatrix::zeros(rows, d);
    xp.view_mut((0, 0), (x.nrows(), d)).copy_from(&x);
    let svd = xp.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = RANK_TOL * smax.max(1.0);
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut yp = DMatrix::zeros(rows, y.ncols());
    yp.view_mut((0, 0), (y.nrows(), y.ncols())).copy_from(&y);
    // theta' = V S^+ U' Y
    let uty = u.tr_mul(&yp);
    let mut theta_t = DMatrix::zeros(d, y.ncols());
    for (i, &s) in sv.iter().enumerate() {
        if s > tol {
            theta_t += vt.row(i).transpose() * (uty.row(i) / s);
        }
    }
    let rank_deficient = rank < d;
    let null_direction = rank_deficient.then(|| {
        let imin = (0..sv.len()).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap();
        let v = vt.row(imin).transpose();
        v.clone() / v.norm()
    });
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if rank_deficient { f64::INFINITY } else { smax / smin };
    Ok(LsFit {
        theta: theta_t.transpose(),
        rank,
        rank_deficient,
        null_direction,
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsys::{step, ThetaSet};
    use nalgebra::{dmatrix, dvector};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noiseless_data(seed: u64, samples: usize) -> (DMatrix<f64>, RegressionData) {
        let set = ThetaSet::new(2, 1, 2.0, 0.95);
        let sys = set.sample(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = dvector![0.3, -0.2];
        let mut data = RegressionData::new();
        for _ in 0..samples {
            let u = dvector![rng.random_range(-1.0..1.0)];
            let xn = step(&sys, &x, &u).unwrap();
            data.push(&x, &u, &xn).unwrap();
            x = xn;
        }
        (sys.theta(), data)
    }

    #[test]
    fn noiseless_interpolation() {
        let (theta, data) = noiseless_data(1, 30);
        let prior = DMatrix::zeros(2, 3);
        let est = regularized_ls(&data, &prior, 0.0).unwrap();
        assert!((est - &theta).norm() < 1e-8);
        let fit = unregularized_ls(&data).unwrap();
        assert!(!fit.rank_deficient);
        assert!((fit.theta - theta).norm() < 1e-8);
    }

    #[test]
    fn huge_lambda_returns_prior() {
        let (_, data) = noiseless_data(2, 30);
        let prior = dmatrix![0.1, 0.2, 0.3; -0.4, 0.5, 0.6];
        let est = regularized_ls(&data, &prior, 1e12).unwrap();
        assert!((est - &prior).norm() <= 1e-6 * prior.norm());
    }

    #[test]
    fn two_sample_hand_solve() {
        let mut data = RegressionData::new();
        data.push(&dvector![1.0], &dvector![0.0], &dvector![0.6]).unwrap();
        data.push(&dvector![0.0], &dvector![1.0], &dvector![0.9]).unwrap();
        let est = regularized_ls(&data, &DMatrix::zeros(1, 2), 1.0).unwrap();
        // (I + I)^{-1} [0.6, 0.9]
        assert!((est - dmatrix![0.3, 0.45]).amax() < 1e-15);
    }

    #[test]
    fn single_sample_is_flagged_and_minimum_norm() {
        let mut data = RegressionData::new();
        data.push(&dvector![1.0], &dvector![1.0], &dvector![0.7]).unwrap();
        let fit = unregularized_ls(&data).unwrap();
        assert!(fit.rank_deficient);
        assert_eq!(fit.rank, 1);
        assert!((fit.theta.clone() - dmatrix![0.35, 0.35]).amax() < 1e-14);
        let v = fit.null_direction.unwrap();
        assert!((v[0] + v[1]).abs() < 1e-12);
        assert!(matches!(
            regularized_ls(&data, &DMatrix::zeros(1, 2), 0.0),
            Err(Error::RankDeficient { rank: 1, dim: 2 })
        ));
    }

    #[test]
    fn pseudo_inverse_matches_ridge_at_zero() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut data = RegressionData::new();
            for _ in 0..15 {
                let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let u = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
                let t = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                data.push(&y, &u, &t).unwrap();
            }
            let a = unregularized_ls(&data).unwrap().theta;
            let b = regularized_ls(&data, &DMatrix::zeros(2, 3), 0.0).unwrap();
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn ridge_gradient_vanishes() {
        let (_, data) = noiseless_data(3, 25);
        let prior = dmatrix![0.5, 0.0, 1.0; 0.0, 0.5, 0.0];
        let lambda = 3.0;
        let est = regularized_ls(&data, &prior, lambda).unwrap();
        let (x, y) = (data.x(), data.y());
        // d/dtheta of |Y - X theta'|^2 + lambda |theta - prior|^2
        let grad = (&est * x.tr_mul(&x) - y.tr_mul(&x)) * 2.0 + (&est - &prior) * (2.0 * lambda);
        assert!(grad.amax() <= 1e-9);
    }

    #[test]
    fn shrinkage_toward_prior_is_monotone_in_lambda() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let mut data = RegressionData::new();
            for _ in 0..10 {
                let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let u = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
                let t = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                data.push(&y, &u, &t).unwrap();
            }
            let prior = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
            let mut last = f64::INFINITY;
            for lambda in [0.0, 1.0, 10.0, 100.0] {
                let d = (regularized_ls(&data, &prior, lambda).unwrap() - &prior).norm();
                assert!(d <= last + 1e-12, "seed {seed}");
                last = d;
            }
        }
    }
}
