//! Persistence of excitation: the input perturbation and its online check.
//!
//! Inputs are stacked into columns `W_k = [ū_k; …; ū_{k+n}]` of size
//! `q = (n+1)m`. Each new input completes one column; it is nudged so that
//! the column leaves the span of the previous `q - 1` columns, keeping every
//! `q × q` block `M_t = [W_t, …, W_{t+q-1}]` inside an interval full rank.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

/// Singular values (relative to the largest) and block norms below this are zero.
pub const NULL_FLOOR: f64 = 1e-10;
/// Accumulated inner products are required to stay outside `[-SIGN_TOL, SIGN_TOL]`.
pub const SIGN_TOL: f64 = 1e-12;

/// `W_k` from `inputs[k..=k+n]` (0-based).
pub fn stacked_column(inputs: &[DVector<f64>], k: usize, n: usize) -> DVector<f64> {
    let m = inputs[k].len();
    let mut w = DVector::zeros((n + 1) * m);
    for b in 0..=n {
        w.rows_mut(b * m, m).copy_from(&inputs[k + b]);
    }
    w
}

/// `M = [W_start, …, W_{start+q-1}]`; needs `q + n` inputs from `start`.
pub fn block_matrix(inputs: &[DVector<f64>], start: usize, n: usize) -> DMatrix<f64> {
    let m = inputs[start].len();
    let q = (n + 1) * m;
    let mut out = DMatrix::zeros(q, q);
    for c in 0..q {
        out.set_column(c, &stacked_column(inputs, start + c, n));
    }
    out
}

/// Orthonormal basis of the left null space of `cols` (`D × k`, `k < D` or rank deficient).
fn left_null_basis(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cols.nrows();
    if cols.ncols() == 0 {
        return DMatrix::identity(d, d);
    }
    let mut sq = DMatrix::zeros(d, d.max(cols.ncols()));
    sq.view_mut((0, 0), (d, cols.ncols())).copy_from(cols);
    let svd = sq.svd(true, false);
    let u = svd.u.expect("u requested");
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = NULL_FLOOR * smax.max(1.0);
    // the padded square has d singular values; any beyond the column count are zero
    let keep: Vec<usize> = (0..d).filter(|&i| i >= sv.len() || sv[i] <= tol).collect();
    DMatrix::from_fn(d, keep.len(), |r, c| u[(r, keep[c])])
}

/// Unit vector orthogonal to every column of `cols`. With a null space of
/// dimension above one, the member with the largest final `m`-block is taken
/// so the next input has the most leverage on it.
pub fn null_direction(cols: &DMatrix<f64>, m: usize) -> DVector<f64> {
    let basis = left_null_basis(cols);
    let d = basis.nrows();
    if basis.ncols() == 1 {
        return basis.column(0).into_owned();
    }
    let tail = basis.rows(d - m, m).into_owned();
    let svd = tail.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let imax = (0..svd.singular_values.len())
        .max_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    let c = if svd.singular_values.is_empty() {
        let mut e = DVector::zeros(basis.ncols());
        e[0] = 1.0;
        e
    } else {
        vt.row(imax).transpose()
    };
    let w = &basis * c;
    let norm = w.norm();
    w / norm
}

/// Per-episode excitation bookkeeping; blocks restart at every interval.
#[derive(Clone, Debug)]
pub struct ExciteState {
    n: usize,
    m: usize,
    interval: usize,
    c_p: f64,
    recent: VecDeque<DVector<f64>>,
    steps: usize,
}

impl ExciteState {
    pub fn new(n: usize, m: usize) -> Self {
        ExciteState {
            n,
            m,
            interval: 0,
            c_p: 0.0,
            recent: VecDeque::new(),
            steps: 0,
        }
    }

    /// Stacked dimension `q = n_c = (n+1)m`.
    pub fn q(&self) -> usize {
        (self.n + 1) * self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn c_p(&self) -> f64 {
        self.c_p
    }

    /// Inputs recorded since the current interval started.
    pub fn steps_in_interval(&self) -> usize {
        self.steps
    }

    pub fn start_interval(&mut self, j: usize, c_p: f64) {
        self.interval = j;
        self.c_p = c_p;
        self.recent.clear();
        self.steps = 0;
    }

    /// Append the applied (perturbed) input.
    pub fn record(&mut self, u_bar: &DVector<f64>) {
        self.recent.push_back(u_bar.clone());
        let cap = self.q() + self.n - 1;
        while self.recent.len() > cap {
            self.recent.pop_front();
        }
        self.steps += 1;
    }

    /// The last (at most `q - 1`) completed columns of the current interval.
    pub fn retained_columns(&self) -> DMatrix<f64> {
        let inputs: Vec<DVector<f64>> = self.recent.iter().cloned().collect();
        let count = inputs.len().saturating_sub(self.n).min(self.q() - 1);
        let first = inputs.len().saturating_sub(self.n).saturating_sub(count);
        let mut cols = DMatrix::zeros(self.q(), count);
        for c in 0..count {
            cols.set_column(c, &stacked_column(&inputs, first + c, self.n));
        }
        cols
    }
}

/// Null direction for the column the next input completes.
#[derive(Clone, Debug, PartialEq)]
pub struct Orthogonal {
    /// Unit `W⊥`; `None` while no column can be completed yet.
    pub w_perp: Option<DVector<f64>>,
    /// Final block `u⊥` of `W⊥` (zero when it vanishes or is undefined).
    pub u_perp: DVector<f64>,
    /// `Σ (u⊥_k)ᵀ ū_k` over the already-applied inputs of the column.
    pub g: f64,
}

impl Orthogonal {
    pub fn is_degenerate(&self) -> bool {
        self.u_perp.iter().all(|&v| v == 0.0)
    }
}

pub fn orthogonal_direction(state: &ExciteState) -> Orthogonal {
    let (n, m) = (state.n, state.m);
    if state.recent.len() < n {
        return Orthogonal { w_perp: None, u_perp: DVector::zeros(m), g: 0.0 };
    }
    let w = null_direction(&state.retained_columns(), m);
    let q = state.q();
    let prefix: Vec<&DVector<f64>> = state.recent.iter().skip(state.recent.len() - n).collect();
    let g = (0..n).map(|b| w.rows(b * m, m).dot(prefix[b])).sum();
    let mut u_perp = w.rows(q - m, m).into_owned();
    if u_perp.norm() <= NULL_FLOOR {
        u_perp.fill(0.0);
    }
    Orthogonal { w_perp: Some(w), u_perp, g }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbCase {
    /// `u⊥` vanishes (or no column completes): `√c_p e_t`.
    NoDirection,
    /// `g⊥ = 0`: `sign(g) √c_p e⊥`.
    Orthogonal,
    /// `g_s < 0`, `|‖u‖ − √c_p| ≥ √c_p`: `g_s √c_p e_t`.
    Reverse,
    /// `g_s < 0`, `|‖u‖ − √c_p| < √c_p`: `2 g_s √c_p e_t`.
    ReverseDouble,
    /// Otherwise: `√c_p e_t`.
    Along,
}

#[derive(Clone, Debug)]
pub struct Perturbation {
    pub delta: DVector<f64>,
    pub case: PerturbCase,
    pub g: f64,
    pub g_perp: f64,
    /// `(W⊥)ᵀ W` of the completed column after perturbation.
    pub accumulated: f64,
}

fn unit_or_first(u: &DVector<f64>) -> DVector<f64> {
    let norm = u.norm();
    if norm > 0.0 {
        u / norm
    } else {
        let mut e = DVector::zeros(u.len());
        e[0] = 1.0;
        e
    }
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// The case table for one input, given the direction data.
pub fn perturb_with(dir: &Orthogonal, u: &DVector<f64>, c_p: f64) -> Perturbation {
    let sq = c_p.sqrt();
    let e_t = unit_or_first(u);
    let g = dir.g;
    if dir.is_degenerate() {
        return Perturbation {
            delta: e_t * sq,
            case: PerturbCase::NoDirection,
            g,
            g_perp: 0.0,
            accumulated: g,
        };
    }
    let e_perp = dir.u_perp.normalize();
    let g_perp = dir.u_perp.dot(u);
    let (delta, case) = if g_perp == 0.0 {
        (e_perp.clone() * (sign(g) * sq), PerturbCase::Orthogonal)
    } else {
        let s = g + g_perp;
        let g_s = if s == 0.0 { 1.0 } else { sign(s) * sign(g_perp) };
        if g_s < 0.0 {
            if (u.norm() - sq).abs() >= sq {
                (&e_t * (g_s * sq), PerturbCase::Reverse)
            } else {
                (&e_t * (2.0 * g_s * sq), PerturbCase::ReverseDouble)
            }
        } else {
            (&e_t * sq, PerturbCase::Along)
        }
    };
    let accumulated = g + dir.u_perp.dot(&(u + &delta));
    Perturbation { delta, case, g, g_perp, accumulated }
}

/// `δu_t` for the intermediate input `u` at the state's current position.
pub fn perturb(state: &ExciteState, u: &DVector<f64>) -> Perturbation {
    perturb_with(&orthogonal_direction(state), u, state.c_p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PECertificate {
    pub interval: usize,
    pub lambda_min: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// `λ_min(Σ z_k z_kᵀ)` against `γ c_p t_j`, with `t_j = zs.len()`.
pub fn certify_pe(zs: &[DVector<f64>], interval: usize, c_p: f64, gamma: f64) -> PECertificate {
    let d = zs.first().map_or(0, |z| z.len());
    let mut v = DMatrix::zeros(d, d);
    for z in zs {
        v.syger(1.0, z, z, 1.0);
    }
    let lambda_min = if d == 0 {
        0.0
    } else {
        v.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let threshold = gamma * c_p * zs.len() as f64;
    PECertificate { interval, lambda_min, threshold, pass: lambda_min >= threshold }
}

/// Constructive exciting sequence: `u_k = e_j` for the largest `j ≤ m` with
/// `(k - 1) mod (n+1)j = 0`, zero when there is none.
pub fn probing_sequence(k: usize, n: usize, m: usize) -> DVector<f64> {
    assert!(k >= 1, "probing sequence starts at k = 1");
    let mut u = DVector::zeros(m);
    if let Some(j) = (1..=m).rev().find(|&j| (k - 1) % ((n + 1) * j) == 0) {
        u[j - 1] = 1.0;
    }
    u
}
