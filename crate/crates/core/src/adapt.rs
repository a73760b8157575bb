//! Violation metrics and the trust-region / penalty schedules.
//!
//! All threshold comparisons are strict: a violation exactly on a
//! threshold leaves the corresponding parameter unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subproblem::SubproblemSolution;

/// Schedule parameters. Thresholds must satisfy
/// `0 < eps_feas < tau_feas < tau_viol`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdaptConfig {
    /// Trust-region expansion factor, > 1.
    pub beta_exp: f64,
    /// Trust-region contraction factor, in (0, 1).
    pub beta_con: f64,
    pub delta_init: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Expansion threshold on dynamics/hard violations.
    pub tau_feas: f64,
    /// Contraction / penalty-increase threshold.
    pub tau_viol: f64,
    /// Penalty growth factors, > 1.
    pub rho_mu: f64,
    pub rho_gamma: f64,
    pub mu_init: f64,
    pub mu_max: f64,
    /// Initial soft penalties, one per class.
    pub gamma_init: Vec<f64>,
    pub gamma_max: Vec<f64>,
    /// Soft-violation thresholds, one per class.
    pub tau_soft: Vec<f64>,
    /// Convergence tolerance on dynamics/hard violations.
    pub eps_feas: f64,
    /// Convergence tolerance on the trajectory step norm.
    pub eps_z: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            beta_exp: 1.5,
            beta_con: 0.5,
            delta_init: 0.5,
            delta_min: 0.01,
            delta_max: 2.0,
            tau_feas: 1e-4,
            tau_viol: 1e-2,
            rho_mu: 2.0,
            rho_gamma: 2.0,
            mu_init: 10.0,
            mu_max: 1e6,
            gamma_init: vec![100.0, 10.0],
            gamma_max: vec![1e6, 1e6],
            tau_soft: vec![1e-2, 1e-2],
            eps_feas: 1e-5,
            eps_z: 1e-4,
        }
    }
}

impl AdaptConfig {
    pub fn n_classes(&self) -> usize {
        self.gamma_init.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_exp > 1.0) {
            return Err(Error::invalid("beta_exp", "must be > 1"));
        }
        if !(self.beta_con > 0.0 && self.beta_con < 1.0) {
            return Err(Error::invalid("beta_con", "must be in (0, 1)"));
        }
        if !(0.0 < self.eps_feas && self.eps_feas < self.tau_feas && self.tau_feas < self.tau_viol)
        {
            return Err(Error::invalid(
                "thresholds",
                "require 0 < eps_feas < tau_feas < tau_viol",
            ));
        }
        if !(self.delta_min > 0.0 && self.delta_min <= self.delta_init && self.delta_init <= self.delta_max)
        {
            return Err(Error::invalid(
                "delta bounds",
                "require 0 < delta_min <= delta_init <= delta_max",
            ));
        }
        if !(self.rho_mu > 1.0 && self.rho_gamma > 1.0) {
            return Err(Error::invalid("rho", "penalty growth factors must be > 1"));
        }
        if !(self.mu_init > 0.0 && self.mu_init <= self.mu_max) {
            return Err(Error::invalid("mu", "require 0 < mu_init <= mu_max"));
        }
        let j = self.gamma_init.len();
        if self.gamma_max.len() != j || self.tau_soft.len() != j {
            return Err(Error::invalid(
                "soft classes",
                "gamma_init, gamma_max, tau_soft lengths must agree",
            ));
        }
        for i in 0..j {
            if !(self.gamma_init[i] > 0.0 && self.gamma_init[i] <= self.gamma_max[i]) {
                return Err(Error::invalid(
                    "gamma",
                    format!("class {i}: require 0 < gamma_init <= gamma_max"),
                ));
            }
            if !(self.tau_soft[i] > 0.0) {
                return Err(Error::invalid("tau_soft", "must be > 0"));
            }
        }
        if !(self.eps_z > 0.0) {
            return Err(Error::invalid("eps_z", "must be > 0"));
        }
        Ok(())
    }
}

/// Per-iteration violation metrics: `∞`-norm maxima of dynamics/hard
/// slacks and `ℓ₁` sums of soft slacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Violations {
    pub dyn_viol: f64,
    pub hard_viol: f64,
    pub soft_viol: Vec<f64>,
}

/// Mutable schedule state carried across outer iterations.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub delta: f64,
    pub mu: f64,
    pub gammas: Vec<f64>,
    pub iteration: usize,
    pub mu_increases: usize,
    pub gamma_increases: Vec<usize>,
}

impl AdaptState {
    pub fn new(config: &AdaptConfig) -> Self {
        AdaptState {
            delta: config.delta_init,
            mu: config.mu_init,
            gammas: config.gamma_init.clone(),
            iteration: 0,
            mu_increases: 0,
            gamma_increases: vec![0; config.n_classes()],
        }
    }
}

/// Extract the violation metrics from an optimal subproblem solution.
pub fn violations(sol: &SubproblemSolution) -> Violations {
    let inf_max = |slacks: &[nalgebra::DVector<f64>]| {
        slacks
            .iter()
            .flat_map(|s| s.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    };
    let dyn_viol = inf_max(&sol.dyn_slacks);
    let hard_viol = inf_max(&sol.hard_slacks);
    let soft_viol = sol
        .soft_slacks
        .iter()
        .map(|class| {
            class
                .iter()
                .map(|d| d.iter().map(|v| v.abs()).sum::<f64>())
                .sum()
        })
        .collect();
    Violations {
        dyn_viol,
        hard_viol,
        soft_viol,
    }
}

/// Trust-region update: expand when both violations are strictly below
/// `tau_feas`, contract when either is strictly above `tau_viol`, hold
/// otherwise.
pub fn update_trust_region(delta: f64, config: &AdaptConfig, nu_dyn: f64, nu_hard: f64) -> f64 {
    if nu_dyn < config.tau_feas && nu_hard < config.tau_feas {
        (config.beta_exp * delta).min(config.delta_max)
    } else if nu_dyn > config.tau_viol || nu_hard > config.tau_viol {
        (config.beta_con * delta).max(config.delta_min)
    } else {
        delta
    }
}

/// Penalty update: grow `mu` when a dynamics or hard violation is
/// strictly above `tau_viol`; grow `gamma_j` when class `j`'s violation
/// is strictly above its threshold. All growth is capped.
pub fn update_penalties(
    state: &AdaptState,
    config: &AdaptConfig,
    nu_dyn: f64,
    nu_hard: f64,
    nu_soft: &[f64],
) -> (f64, Vec<f64>) {
    let mu = if nu_dyn > config.tau_viol || nu_hard > config.tau_viol {
        (config.rho_mu * state.mu).min(config.mu_max)
    } else {
        state.mu
    };
    let gammas = state
        .gammas
        .iter()
        .zip(nu_soft)
        .zip(&config.tau_soft)
        .zip(&config.gamma_max)
        .map(|(((&g, &nu), &tau), &cap)| {
            if nu > tau {
                (config.rho_gamma * g).min(cap)
            } else {
                g
            }
        })
        .collect();
    (mu, gammas)
}

/// Convergence test: all three strict inequalities must hold.
pub fn converged(nu_dyn: f64, nu_hard: f64, step_norm: f64, config: &AdaptConfig) -> bool {
    nu_dyn < config.eps_feas && nu_hard < config.eps_feas && step_norm < config.eps_z
}

/// Apply the full adaptation step and advance the iteration counter.
pub fn apply(state: &mut AdaptState, config: &AdaptConfig, nu: &Violations) {
    let new_delta = update_trust_region(state.delta, config, nu.dyn_viol, nu.hard_viol);
    let (new_mu, new_gammas) = update_penalties(state, config, nu.dyn_viol, nu.hard_viol, &nu.soft_viol);
    if new_mu > state.mu {
        state.mu_increases += 1;
    }
    for (count, (new_g, old_g)) in state
        .gamma_increases
        .iter_mut()
        .zip(new_gammas.iter().zip(&state.gammas))
    {
        if new_g > old_g {
            *count += 1;
        }
    }
    state.delta = new_delta;
    state.mu = new_mu;
    state.gammas = new_gammas;
    state.iteration += 1;
}
