//! Regularized negative log-likelihood of the controller parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    controller_accel, finite_diff_accels, rollout, ControllerParams, Hyperparams, Scenario, VehicleState,
};

/// The summands of the negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodBreakdown {
    pub data_fit: f64,
    pub gap_prior: f64,
    pub gain_shrinkage: f64,
    pub future_velocity_feasible: bool,
    /// `+inf` when the predicted velocities leave the feasible set.
    pub total: f64,
}

/// Prior mean gap from the observed gaps, unit precisions.
pub fn default_hyperparams(scenario: &Scenario) -> Result<Hyperparams> {
    if scenario.observed.is_empty() {
        return Err(Error::EmptyObservation);
    }
    let g0 = scenario.observed_gaps().sum::<f64>() / scenario.k() as f64;
    if g0 == 0.0 {
        log::warn!("mean observed gap is zero; gain shrinkage term vanishes");
    }
    Ok(Hyperparams::new(1.0, g0, 1.0))
}

/// Half the sum of squared residuals between finite-difference accelerations
/// and the controller output, scaled by the (unit) noise variance.
pub fn data_fit_term(scenario: &Scenario, theta: &ControllerParams) -> Result<f64> {
    data_fit_with_variance(scenario, theta, 1.0)
}

fn data_fit_with_variance(scenario: &Scenario, theta: &ControllerParams, sigma_a_sq: f64) -> Result<f64> {
    let accels = finite_diff_accels(&scenario.lag_velocities(), scenario.dt)?;
    let sum: f64 = accels
        .iter()
        .zip(&scenario.observed)
        .map(|(a, s)| {
            let r = a - controller_accel(s, theta, scenario.lead_length);
            r * r
        })
        .sum();
    Ok(sum / (2.0 * sigma_a_sq))
}

/// `(gap_prior, gain_shrinkage)`.
pub fn prior_terms(theta: &ControllerParams, gamma: &Hyperparams) -> (f64, f64) {
    let dg = theta.g_star - gamma.g0;
    let gap_prior = gamma.alpha * dg * dg;
    let gain_shrinkage = gamma.beta * gamma.g0 * gamma.g0 * (theta.k_v * theta.k_v + theta.k_g * theta.k_g);
    (gap_prior, gain_shrinkage)
}

/// Whether every predicted lag velocity is nonnegative. A vehicle at rest
/// counts as feasible.
pub fn future_velocity_feasible(scenario: &Scenario, theta: &ControllerParams) -> bool {
    match scenario.last_observed() {
        Some(last) => rollout_is_feasible(&rollout(scenario, theta, last.lag)),
        None => false,
    }
}

pub fn rollout_is_feasible(trajectory: &[VehicleState]) -> bool {
    trajectory.iter().all(|s| s.v >= 0.0)
}

pub fn neg_log_likelihood(
    scenario: &Scenario,
    theta: &ControllerParams,
    gamma: &Hyperparams,
) -> Result<LikelihoodBreakdown> {
    let feasible = future_velocity_feasible(scenario, theta);
    neg_log_likelihood_given_feasibility(scenario, theta, gamma, feasible)
}

/// Same as [`neg_log_likelihood`] when the caller already rolled the
/// trajectory out and knows whether it is feasible.
pub fn neg_log_likelihood_given_feasibility(
    scenario: &Scenario,
    theta: &ControllerParams,
    gamma: &Hyperparams,
    feasible: bool,
) -> Result<LikelihoodBreakdown> {
    let data_fit = data_fit_with_variance(scenario, theta, gamma.sigma_a_sq)?;
    let (gap_prior, gain_shrinkage) = prior_terms(theta, gamma);
    let total = if feasible {
        data_fit + gap_prior + gain_shrinkage
    } else {
        f64::INFINITY
    };
    Ok(LikelihoodBreakdown {
        data_fit,
        gap_prior,
        gain_shrinkage,
        future_velocity_feasible: feasible,
        total,
    })
}
