//! Constants of the inner learner and the confidence radius.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Which second term the confidence radius uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BetaVariant {
    /// `lambda |theta*_j - phi|_F / (gamma_y c_p t_j)`.
    #[default]
    Equation,
    /// `lambda S / gamma_y`, as written in the pseudocode.
    Algorithm,
}

/// Largest `H` accepted from the literal `j*` rule before an override is required.
pub const MAX_AUTO_H: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProblemSize {
    pub n: usize,
    pub m: usize,
    /// Episode length `T`.
    pub t: usize,
    /// Number of episodes `N`.
    pub episodes: usize,
    pub delta: f64,
    /// Noise scale `R`.
    pub r: f64,
    /// Frobenius bound `S`.
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerConstants {
    pub n: usize,
    pub m: usize,
    pub n_c: usize,
    pub gamma: f64,
    pub delta_tilde: f64,
    pub n_tilde_c: f64,
    pub nn_tilde_c: f64,
    /// `None` when the literal rule overflows `MAX_AUTO_H`.
    pub j_star: Option<u64>,
    pub h: usize,
    pub h_overridden: bool,
    pub lambda: f64,
    pub r_hat: f64,
    pub r_tilde: f64,
    pub gamma_y: f64,
    pub s: f64,
    pub beta_variant: BetaVariant,
}

impl InnerConstants {
    pub fn derive(p: &ProblemSize, h_override: Option<usize>, lambda_override: Option<f64>) -> Result<Self> {
        let ProblemSize { n, m, t, episodes, delta, r, s } = *p;
        if n == 0 || m == 0 || t == 0 || episodes == 0 {
            return Err(Error::invalid("size", "n, m, T and N must be positive"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid("delta", "must lie in (0, 1)"));
        }
        if !(r >= 0.0) || !(s > 0.0) {
            return Err(Error::invalid("R, S", "need R >= 0 and S > 0"));
        }
        let n_c = (n + 1) * m;
        let gamma = 1.0 / n_c as f64;
        let two_t_log = (2.0 * t as f64).ln();
        let delta_tilde = delta / (2.0 * episodes as f64 * two_t_log);
        let nf = n as f64;
        let n_tilde_c = (16.0 * nf * nf * r * r / gamma).powi(2);
        let nn_tilde_c = 2f64.sqrt().powi((n + m + 2) as i32);
        let threshold = (2.0 * n_c as f64).max(
            n_tilde_c * (nn_tilde_c * episodes as f64 * two_t_log / delta).ln().powi(2),
        );
        let j_real = (threshold / n_c as f64).ceil().max(1.0);
        let j_star = (j_real * n_c as f64 + n as f64 <= MAX_AUTO_H as f64).then_some(j_real as u64);
        let (h, h_overridden) = match (h_override, j_star) {
            (Some(h), _) => {
                if h == 0 {
                    return Err(Error::invalid("H", "override must be positive"));
                }
                if let Some(j) = j_star {
                    if h as u64 != j * n_c as u64 + n as u64 {
                        log::warn!("H overridden to {h}; the j* rule gives {}", j * n_c as u64 + n as u64);
                    }
                } else {
                    log::warn!("H overridden to {h}; the j* rule overflows");
                }
                (h, true)
            }
            (None, Some(j)) => (j as usize * n_c + n, false),
            (None, None) => {
                return Err(Error::invalid(
                    "H",
                    format!("the j* rule asks for H above {MAX_AUTO_H}; set an explicit H"),
                ))
            }
        };
        let lambda = match lambda_override {
            Some(l) if l >= 0.0 => l,
            Some(_) => return Err(Error::invalid("lambda", "must be nonnegative")),
            None => (t as f64).powf(0.25),
        };
        let r_hat = nf * (nf + 1.0) * s.max(1.0) * r;
        let r_tilde = 2.0 * r_hat * (((n + m) as f64) * 2f64.sqrt().ln() - delta_tilde.ln()).sqrt();
        let gamma_y = gamma
            * (1.0
                - 2.0 * nf * r / (gamma * (h as f64).sqrt()).sqrt()
                    * (4.0 * (2f64.sqrt().powi((n + m) as i32) / delta_tilde).ln()).sqrt());
        Ok(InnerConstants {
            n,
            m,
            n_c,
            gamma,
            delta_tilde,
            n_tilde_c,
            nn_tilde_c,
            j_star,
            h,
            h_overridden,
            lambda,
            r_hat,
            r_tilde,
            gamma_y,
            s,
            beta_variant: BetaVariant::Equation,
        })
    }

    /// Length of interval `j` (1-based): `2^{j-1} H`.
    pub fn interval_length(&self, j: usize) -> usize {
        self.h << (j - 1)
    }

    /// Excitation level `c_{p,j} = H_j^{-1/2}`.
    pub fn c_p(&self, j: usize) -> f64 {
        1.0 / (self.interval_length(j) as f64).sqrt()
    }

    /// Confidence radius after interval `j`, with `t_j` samples.
    pub fn beta(&self, c_p: f64, t_j: usize, theta_star: &DMatrix<f64>, phi: &DMatrix<f64>) -> f64 {
        confidence_radius(self, c_p, t_j, theta_star, phi)
    }
}

/// `R~ / sqrt(gamma c_p t_j)` plus the shrinkage term of the configured variant.
/// A nonpositive `gamma_y` makes a nonzero shrinkage term infinite.
pub fn confidence_radius(
    k: &InnerConstants,
    c_p: f64,
    t_j: usize,
    theta_star: &DMatrix<f64>,
    phi: &DMatrix<f64>,
) -> f64 {
    let first = k.r_tilde / (k.gamma * c_p * t_j as f64).sqrt();
    let numer = match k.beta_variant {
        BetaVariant::Equation => k.lambda * (theta_star - phi).norm(),
        BetaVariant::Algorithm => k.lambda * k.s,
    };
    let second = if numer == 0.0 {
        0.0
    } else if k.gamma_y <= 0.0 {
        f64::INFINITY
    } else {
        match k.beta_variant {
            BetaVariant::Equation => numer / (k.gamma_y * c_p * t_j as f64),
            BetaVariant::Algorithm => numer / k.gamma_y,
        }
    };
    first + second
}
