//! The unknown plant: a linear deterministic system observed through bounded noise.
//!
//! Dynamics are `x_{t+1} = A x_t + B u_t` with no process noise; noise only
//! enters the observation `y_t = x_t + eps_t`, `|eps_t|_2 <= eps_c`.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative tolerance used for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-9;

/// `theta = [A, B]`, with `A` n×n and `B` n×m.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemParams {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl SystemParams {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::invalid("A", "must be square"));
        }
        if a.nrows() == 0 || b.ncols() == 0 {
            return Err(Error::invalid("theta", "n and m must be positive"));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::dims("B rows", a.nrows(), b.nrows()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("theta", "entries must be finite"));
        }
        Ok(SystemParams { a, b })
    }

    /// Split an n×(n+m) parameter matrix back into `[A, B]`.
    pub fn from_theta(theta: &DMatrix<f64>) -> Result<Self> {
        let n = theta.nrows();
        if theta.ncols() <= n {
            return Err(Error::invalid("theta", "needs n+m columns with m >= 1"));
        }
        let m = theta.ncols() - n;
        Self::new(
            theta.columns(0, n).into_owned(),
            theta.columns(n, m).into_owned(),
        )
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn theta(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut th = DMatrix::zeros(n, n + m);
        th.columns_mut(0, n).copy_from(&self.a);
        th.columns_mut(n, m).copy_from(&self.b);
        th
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.a.norm_squared() + self.b.norm_squared()).sqrt()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    /// Numerical rank of `[B, AB, ..., A^{n-1}B]`.
    pub fn controllability_rank(&self) -> usize {
        numerical_rank(&controllability_matrix(&self.a, &self.b))
    }

    pub fn is_controllable(&self) -> bool {
        self.controllability_rank() == self.n()
    }
}

pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), b.ncols());
    let mut c = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        c.columns_mut(k * m, m).copy_from(&blk);
        blk = a * blk;
    }
    c
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 1 {
        return a[(0, 0)].abs();
    }
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn numerical_rank(mat: &DMatrix<f64>) -> usize {
    if mat.is_empty() {
        return 0;
    }
    let sv = mat.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = RANK_TOL * smax.max(1.0);
    sv.iter().filter(|&&s| s > tol).count()
}

/// One step of the true plant. Noise never enters here.
pub fn step(sys: &SystemParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != sys.n() {
        return Err(Error::dims("state", sys.n(), x.len()));
    }
    if u.len() != sys.m() {
        return Err(Error::dims("input", sys.m(), u.len()));
    }
    Ok(sys.a() * x + sys.b() * u)
}

/// Known compact parameter set: a Frobenius ball intersected with
/// `{rho(A) <= rho_max}` and controllability, optionally with a task
/// distribution concentrated around an anchor system.
#[derive(Clone, Debug)]
pub struct ThetaSet {
    pub n: usize,
    pub m: usize,
    /// Frobenius bound `S`.
    pub radius: f64,
    pub rho_max: f64,
    pub anchor: Option<SystemParams>,
    pub task_radius: f64,
    pub max_rejections: usize,
}

impl ThetaSet {
    pub fn new(n: usize, m: usize, radius: f64, rho_max: f64) -> Self {
        ThetaSet {
            n,
            m,
            radius,
            rho_max,
            anchor: None,
            task_radius: 0.0,
            max_rejections: 10_000,
        }
    }

    pub fn with_anchor(mut self, anchor: SystemParams, task_radius: f64) -> Self {
        self.anchor = Some(anchor);
        self.task_radius = task_radius;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::invalid("theta", "n and m must be positive"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::invalid("S", "must be positive"));
        }
        if !(self.rho_max > 0.0 && self.rho_max < 1.0) {
            return Err(Error::invalid("rho_max", "must lie in (0, 1)"));
        }
        if !(self.task_radius >= 0.0) {
            return Err(Error::invalid("task_radius", "must be nonnegative"));
        }
        if let Some(anchor) = &self.anchor {
            if anchor.n() != self.n || anchor.m() != self.m {
                return Err(Error::invalid("anchor", "dimensions disagree with (n, m)"));
            }
            if !self.contains(anchor) {
                return Err(Error::invalid("anchor", "is not a member of the parameter set"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, sys: &SystemParams) -> bool {
        sys.n() == self.n
            && sys.m() == self.m
            && sys.frobenius_norm() <= self.radius
            && sys.spectral_radius() <= self.rho_max
            && sys.is_controllable()
    }

    pub fn contains_theta(&self, theta: &DMatrix<f64>) -> bool {
        SystemParams::from_theta(theta)
            .map(|s| self.contains(&s))
            .unwrap_or(false)
    }

    /// Draw a member, rejection-resampling until every invariant holds.
    pub fn sample(&self, seed: u64) -> Result<SystemParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng)
    }

    pub fn sample_with(&self, rng: &mut ChaCha8Rng) -> Result<SystemParams> {
        let (center, ball) = match &self.anchor {
            Some(a) => {
                if self.task_radius == 0.0 {
                    return Ok(a.clone());
                }
                (a.theta(), self.task_radius)
            }
            None => (DMatrix::zeros(self.n, self.n + self.m), self.radius),
        };
        for _ in 0..self.max_rejections {
            let cand = &center + uniform_in_ball(rng, self.n, self.n + self.m, ball);
            let sys = SystemParams::from_theta(&cand)?;
            if sys.spectral_radius() < self.rho_max && self.contains(&sys) {
                return Ok(sys);
            }
        }
        Err(Error::SamplingExhausted(self.max_rejections))
    }
}

/// Uniform draw from the Frobenius ball of the given radius.
pub(crate) fn uniform_in_ball(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    radius: f64,
) -> DMatrix<f64> {
    let d = rows * cols;
    let mut dir = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    let u: f64 = rng.random();
    dir *= radius * u.powf(1.0 / d as f64) / norm;
    dir
}

/// Observation noise: per-component N(0, R^2), resampled until `|eps|_2 <= eps_c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub r: f64,
    pub eps_c: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(r: f64, eps_c: f64, seed: u64) -> Self {
        NoiseModel { r, eps_c, seed }
    }

    pub fn noiseless(seed: u64) -> Self {
        NoiseModel::new(0.0, 0.0, seed)
    }

    pub fn stream(&self, n: usize) -> NoiseStream {
        NoiseStream {
            model: *self,
            n,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        }
    }
}

/// Seeded noise source; advancing it is deterministic in the seed.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    model: NoiseModel,
    n: usize,
    rng: ChaCha8Rng,
}

const MAX_NOISE_REDRAWS: usize = 10_000;

impl NoiseStream {
    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    pub fn sample(&mut self) -> DVector<f64> {
        let NoiseModel { r, eps_c, .. } = self.model;
        if r == 0.0 || eps_c == 0.0 {
            return DVector::zeros(self.n);
        }
        let mut last = DVector::zeros(self.n);
        for _ in 0..MAX_NOISE_REDRAWS {
            let e = DVector::from_fn(self.n, |_, _| r * self.rng.sample::<f64, _>(StandardNormal));
            if e.norm() <= eps_c {
                return e;
            }
            last = e;
        }
        // eps_c far inside the bulk of N(0, R^2 I): fall back to a radial shrink.
        let norm = last.norm();
        last * (eps_c / norm)
    }
}

/// `y = x + eps` with `eps` drawn from the stream.
pub fn observe(x: &DVector<f64>, noise: &mut NoiseStream) -> DVector<f64> {
    x + noise.sample()
}

/// Characteristic-polynomial coefficients `[d_0, ..., d_n]` with `d_0 = 1`,
/// so that `sum_k d_{n-k} z^k = det(zI - A)`. Faddeev–LeVerrier recurrence.
pub fn char_poly_coeffs(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut d = Vec::with_capacity(n + 1);
    d.push(1.0);
    let mut mk = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        mk = a * &mk;
        for i in 0..n {
            mk[(i, i)] += d[k - 1];
        }
        let am = a * &mk;
        d.push(-am.trace() / k as f64);
    }
    d
}

/// `G_theta = [[Q_theta, 0], [H_theta, I_m]]` and `c_g = lambda_min(G G^T)`.
#[derive(Clone, Debug)]
pub struct GMatrix {
    pub g: DMatrix<f64>,
    pub q_theta: DMatrix<f64>,
    pub h_theta: DMatrix<f64>,
    pub c_g: f64,
}

pub fn g_matrix(sys: &SystemParams) -> GMatrix {
    let (n, m) = (sys.n(), sys.m());
    let d = char_poly_coeffs(sys.a());
    // A^{l} B for l = 0..n-1
    let mut powers = Vec::with_capacity(n);
    let mut blk = sys.b().clone();
    for _ in 0..n {
        powers.push(blk.clone());
        blk = sys.a() * blk;
    }
    let q_of = |j: usize| -> DMatrix<f64> {
        let mut q = DMatrix::zeros(n, m);
        for l in 1..=j {
            q += &powers[l - 1] * d[j - l];
        }
        q
    };
    let mut q_theta = DMatrix::zeros(n, n * m);
    let mut h_theta = DMatrix::zeros(m, n * m);
    for c in 0..n {
        q_theta.columns_mut(c * m, m).copy_from(&q_of(n - c));
        let mut h = h_theta.columns_mut(c * m, m);
        h.fill_with_identity();
        h *= d[n - c];
    }
    let mut g = DMatrix::zeros(n + m, (n + 1) * m);
    g.view_mut((0, 0), (n, n * m)).copy_from(&q_theta);
    g.view_mut((n, 0), (m, n * m)).copy_from(&h_theta);
    g.view_mut((n, n * m), (m, m)).fill_with_identity();
    let ggt = &g * g.transpose();
    let c_g = ggt.symmetric_eigenvalues().min();
    GMatrix {
        g,
        q_theta,
        h_theta,
        c_g,
    }
}
