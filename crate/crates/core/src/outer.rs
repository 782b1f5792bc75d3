//! Across-episode meta-learner: projected online gradient descent on the
//! prior `phi` with loss `l_i(phi) = |theta*_i - phi|_F`.

use nalgebra::DMatrix;

use crate::linsys::{spectral_radius, ThetaSet};

/// Margin kept below `rho_max` when the A-block has to be shrunk.
pub const RHO_MARGIN: f64 = 1e-3;

/// Ball projection followed by an A-block rescale when `rho(A) > rho_max`.
///
/// Not the metric projection onto the (nonconvex) parameter set, but it is
/// deterministic and lands inside the ball and the spectral constraint.
pub fn project_theta(psi: &DMatrix<f64>, set: &ThetaSet) -> DMatrix<f64> {
    let norm = psi.norm();
    let mut out = if norm > set.radius {
        psi * (set.radius / norm)
    } else {
        psi.clone()
    };
    let n = out.nrows();
    let rho = spectral_radius(&out.columns(0, n).into_owned());
    if rho > set.rho_max {
        let scale = (set.rho_max - RHO_MARGIN) / rho;
        let mut a = out.columns_mut(0, n);
        a *= scale;
    }
    out
}

/// Index and value of the fit farthest from `phi`; ties go to the earliest.
pub fn episode_anchor(fits: &[DMatrix<f64>], phi: &DMatrix<f64>) -> Option<(usize, DMatrix<f64>)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, f) in fits.iter().enumerate() {
        let d = (f - phi).norm();
        if best.map_or(true, |(_, bd)| d > bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| (j, fits[j].clone()))
}

/// Subgradient of `|theta - phi|_F` in `phi`; zero at the kink.
pub fn loss_gradient(theta: &DMatrix<f64>, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let diff = theta - phi;
    let d = diff.norm();
    if d == 0.0 {
        DMatrix::zeros(phi.nrows(), phi.ncols())
    } else {
        -diff / d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub phi: DMatrix<f64>,
    /// Index `i` of the next episode (1-based).
    pub episode: usize,
    /// `l_k(phi_k)` for completed episodes.
    pub losses: Vec<f64>,
    pub anchors: Vec<DMatrix<f64>>,
    /// `phi_k` used during each completed episode.
    pub phi_history: Vec<DMatrix<f64>>,
}

impl MetaState {
    pub fn new(phi: DMatrix<f64>) -> Self {
        MetaState {
            phi,
            episode: 1,
            losses: Vec::new(),
            anchors: Vec::new(),
            phi_history: Vec::new(),
        }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self::new(DMatrix::zeros(n, n + m))
    }

    /// Step size `eta_i = 1/sqrt(i)`.
    pub fn eta(i: usize) -> f64 {
        1.0 / (i as f64).sqrt()
    }

    /// Running sum of the outer losses.
    pub fn cumulative_loss(&self) -> f64 {
        self.losses.iter().sum()
    }

    /// Record episode `i` without moving `phi` (frozen-prior ablation).
    pub fn record_frozen(&mut self, anchor: &DMatrix<f64>) -> f64 {
        let loss = (anchor - &self.phi).norm();
        self.losses.push(loss);
        self.anchors.push(anchor.clone());
        self.phi_history.push(self.phi.clone());
        self.episode += 1;
        loss
    }

    /// One projected OGD step; returns the loss at the pre-update `phi`.
    pub fn update(&mut self, anchor: &DMatrix<f64>, set: &ThetaSet) -> f64 {
        let i = self.episode;
        let grad = loss_gradient(anchor, &self.phi);
        let psi = &self.phi - grad * Self::eta(i);
        let loss = self.record_frozen(anchor);
        self.phi = project_theta(&psi, set);
        loss
    }
}

/// Functional form of [`MetaState::update`].
pub fn meta_update(state: &MetaState, anchor: &DMatrix<f64>, set: &ThetaSet) -> MetaState {
    let mut next = state.clone();
    next.update(anchor, set);
    next
}
