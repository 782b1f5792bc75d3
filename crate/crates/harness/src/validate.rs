//! Report-only checks of a configuration: sampled plants against the
//! standing assumptions, and the derived learner constants.

use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metarhc::linsys::{g_matrix, SystemParams, ThetaSet};

use crate::config::RunConfig;

/// Below this `c_g` the excitation map is treated as singular.
pub const C_G_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SystemCheck {
    pub label: String,
    pub spectral_radius: f64,
    pub controllability_rank: usize,
    pub c_g: f64,
    pub frobenius: f64,
    pub issues: Vec<String>,
}

impl SystemCheck {
    pub fn of(label: impl Into<String>, sys: &SystemParams, s: f64, rho_max: f64) -> Self {
        let rho = sys.spectral_radius();
        let rank = sys.controllability_rank();
        let c_g = g_matrix(sys).c_g;
        let frob = sys.frobenius_norm();
        let mut issues = Vec::new();
        if rho >= 1.0 {
            issues.push(format!("unstable: spectral radius {rho:.4} >= 1"));
        } else if rho > rho_max {
            issues.push(format!("spectral radius {rho:.4} above rho_max {rho_max}"));
        }
        if rank < sys.n() {
            issues.push(format!("not controllable: rank {rank} < n = {}", sys.n()));
        }
        if c_g < C_G_FLOOR {
            issues.push(format!("c_g = {c_g:.3e} is not positive"));
        }
        if frob > s {
            issues.push(format!("Frobenius norm {frob:.4} above S = {s}"));
        }
        SystemCheck {
            label: label.into(),
            spectral_radius: rho,
            controllability_rank: rank,
            c_g,
            frobenius: frob,
            issues,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstantsReport {
    pub n_c: usize,
    pub j_star: Option<u64>,
    pub h: usize,
    pub h_overridden: bool,
    pub lambda: f64,
    pub delta_tilde: f64,
    pub gamma_y: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub systems: Vec<SystemCheck>,
    pub constants: Option<ConstantsReport>,
    pub notices: Vec<String>,
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty() && self.systems.iter().all(|s| s.issues.is_empty())
    }
}

/// Check the anchor (if any) and `samples` plants drawn from the task set.
pub fn validate(cfg: &RunConfig, samples: usize, seed: u64) -> ValidationReport {
    let mut rep = ValidationReport::default();
    if let Err(e) = cfg.check() {
        rep.issues.extend(e.0.iter().map(|f| f.to_string()));
        return rep;
    }
    let s = &cfg.system;
    let mut set = ThetaSet::new(s.n, s.m, s.s, s.rho_max);
    set.max_rejections = s.max_rejections;
    match cfg.anchor() {
        Ok(Some(a)) => {
            rep.systems.push(SystemCheck::of("anchor", &a, s.s, s.rho_max));
            set = set.with_anchor(a, s.task_radius);
        }
        Ok(None) => {}
        Err(e) => rep.issues.push(format!("{e:#}")),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..samples {
        match set.sample(rng.random()) {
            Ok(sys) => rep.systems.push(SystemCheck::of(format!("sample {}", k + 1), &sys, s.s, s.rho_max)),
            Err(e) => {
                rep.issues.push(format!("sampling: {e}"));
                break;
            }
        }
    }
    match cfg.constants() {
        Ok(k) => {
            if !(k.gamma_y > 0.0) {
                rep.issues.push(format!("gamma_y = {:.4} is not positive; confidence radii are infinite", k.gamma_y));
            }
            if k.h_overridden {
                rep.notices.push(format!("H = {} is an override", k.h));
            }
            rep.constants = Some(ConstantsReport {
                n_c: k.n_c,
                j_star: k.j_star,
                h: k.h,
                h_overridden: k.h_overridden,
                lambda: k.lambda,
                delta_tilde: k.delta_tilde,
                gamma_y: k.gamma_y,
            });
        }
        Err(e) => rep.issues.push(format!("{e:#}")),
    }
    if cfg.episode.n < cfg.episode.t {
        rep.notices.push(format!("N = {} < T = {}", cfg.episode.n, cfg.episode.t));
    }
    rep
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.systems {
            write!(
                f,
                "{:<10} rho {:.4}  rank {}  c_g {:.4e}  |theta|_F {:.4}",
                s.label, s.spectral_radius, s.controllability_rank, s.c_g, s.frobenius
            )?;
            if s.issues.is_empty() {
                writeln!(f, "  ok")?;
            } else {
                writeln!(f, "  FLAGGED: {}", s.issues.join("; "))?;
            }
        }
        if let Some(k) = &self.constants {
            let j = k.j_star.map_or_else(|| "overflow".to_string(), |j| j.to_string());
            writeln!(f, "n_c = {}", k.n_c)?;
            writeln!(f, "j* = {j}")?;
            writeln!(f, "H = {}", k.h)?;
            writeln!(f, "lambda = {}", k.lambda)?;
            writeln!(f, "delta_tilde = {:e}", k.delta_tilde)?;
            writeln!(f, "gamma_y = {}", k.gamma_y)?;
        }
        for n in &self.notices {
            writeln!(f, "notice: {n}")?;
        }
        for i in &self.issues {
            writeln!(f, "issue: {i}")?;
        }
        writeln!(f, "{}", if self.passed() { "all checks passed" } else { "checks FAILED" })
    }
}
