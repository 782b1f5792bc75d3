//! Per-episode identification: ridge regression toward the prior, confidence
//! sets around the estimate and the joint (initial state, model) selection.

mod constants;
mod halton;
mod ls;
mod select;

use nalgebra::DMatrix;

pub use constants::{confidence_radius, BetaVariant, InnerConstants, ProblemSize, MAX_AUTO_H};
pub use halton::{first_primes, radical_inverse, Halton};
pub use ls::{regularized_ls, unregularized_ls, LsFit, RegressionData};
pub use select::{
    candidate_models, select, select_from, CandidateEval, SelectConfig, SelectInput, Selection, TIE_TOL,
};

use crate::error::{Error, Result};
use crate::linsys::ThetaSet;

/// Frobenius ball around an estimate, intersected with the known parameter set.
#[derive(Clone, Debug)]
pub struct ConfidenceSet {
    pub center: DMatrix<f64>,
    /// May be infinite, meaning the whole ambient set.
    pub radius: f64,
    pub ambient: ThetaSet,
}

impl ConfidenceSet {
    pub fn new(center: DMatrix<f64>, radius: f64, ambient: ThetaSet) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::invalid("confidence radius", "must be nonnegative"));
        }
        if center.shape() != (ambient.n, ambient.n + ambient.m) {
            return Err(Error::dims("confidence center columns", ambient.n + ambient.m, center.ncols()));
        }
        Ok(ConfidenceSet { center, radius, ambient })
    }

    /// The whole parameter set, used before any data has arrived. `center`
    /// only steers where candidates are drawn.
    pub fn whole(center: DMatrix<f64>, ambient: ThetaSet) -> Result<Self> {
        Self::new(center, f64::INFINITY, ambient)
    }

    pub fn is_whole(&self) -> bool {
        self.radius.is_infinite()
    }

    pub fn contains(&self, theta: &DMatrix<f64>) -> bool {
        theta.shape() == self.center.shape()
            && (theta - &self.center).norm() <= self.radius
            && self.ambient.contains_theta(theta)
    }
}

/// Everything the inner learner derives at an interval boundary.
#[derive(Clone, Debug)]
pub struct IntervalEstimate {
    /// Ridge estimate shrunk toward the prior.
    pub theta_l: DMatrix<f64>,
    /// Unregularized fit on the same data.
    pub theta_star: LsFit,
    pub beta: f64,
    pub set: ConfidenceSet,
}

/// Fit both estimators on `data` and build the confidence set for interval `j`.
pub fn estimate_interval(
    consts: &InnerConstants,
    data: &RegressionData,
    phi: &DMatrix<f64>,
    c_p: f64,
    ambient: &ThetaSet,
) -> Result<IntervalEstimate> {
    let theta_l = regularized_ls(data, phi, consts.lambda)?;
    let theta_star = unregularized_ls(data)?;
    if theta_star.rank_deficient {
        log::debug!("unregularized fit is rank deficient (rank {})", theta_star.rank);
    }
    let beta = consts.beta(c_p, data.len(), &theta_star.theta, phi);
    let set = ConfidenceSet::new(theta_l.clone(), beta, ambient.clone())?;
    Ok(IntervalEstimate { theta_l, theta_star, beta, set })
}
