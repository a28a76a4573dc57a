//! Importance sampling of controller parameters around the point estimate
//! and the resulting weighted trajectory set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gtrs::{assemble_system, solve_nonnegative, SolverResult};
use crate::likelihood::{neg_log_likelihood, neg_log_likelihood_given_feasibility, rollout_is_feasible};
use crate::model::{rollout, ControllerParams, Hyperparams, Scenario, VehicleState};

pub const DEFAULT_SAMPLES: usize = 1000;

/// Below this acceptance probability rejection sampling is replaced by
/// per-coordinate inverse-CDF draws.
const MIN_ACCEPTANCE: f64 = 0.1;

/// Source of the lead vehicle's future states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LeadMode {
    #[default]
    GroundTruth,
    ConstantVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n: usize,
    pub seed: u64,
    /// Per-coordinate standard deviation of the proposal.
    pub proposal_sd: f64,
    pub lead_mode: LeadMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_SAMPLES,
            seed: 0,
            proposal_sd: 1.0,
            lead_mode: LeadMode::GroundTruth,
        }
    }
}

/// Isotropic normal around `mean` truncated to the nonnegative octant.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedNormalProposal {
    mean: [f64; 3],
    sd: f64,
    /// Per-coordinate mass kept by the truncation, `Phi(mean_i / sd)`.
    mass: [f64; 3],
}

impl TruncatedNormalProposal {
    pub fn new(mean: &ControllerParams, sd: f64) -> Self {
        let std = Normal::standard();
        let mean = mean.to_array();
        let mass = mean.map(|m| std.cdf(m / sd));
        Self { mean, sd, mass }
    }

    /// Probability that an untruncated draw lands in the octant.
    pub fn acceptance(&self) -> f64 {
        self.mass.iter().product()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ControllerParams {
        if self.acceptance() >= MIN_ACCEPTANCE {
            loop {
                let mut p = [0.0; 3];
                for (i, v) in p.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = self.mean[i] + self.sd * z;
                }
                if p.iter().all(|v| *v >= 0.0) {
                    return ControllerParams::from_array(p);
                }
            }
        }
        // Coordinates are independent on an axis-aligned octant.
        let std = Normal::standard();
        let mut p = [0.0; 3];
        for (i, v) in p.iter_mut().enumerate() {
            let lo = 1.0 - self.mass[i];
            let u = Uniform::new(lo, 1.0).map(|d| d.sample(rng)).unwrap_or(lo);
            let z = std.inverse_cdf(u);
            *v = (self.mean[i] + self.sd * z).max(0.0);
        }
        ControllerParams::from_array(p)
    }

    pub fn log_density(&self, theta: &ControllerParams) -> f64 {
        let p = theta.to_array();
        if p.iter().any(|v| *v < 0.0) {
            return f64::NEG_INFINITY;
        }
        let norm = (self.sd * (2.0 * std::f64::consts::PI).sqrt()).ln();
        (0..3)
            .map(|i| {
                let z = (p[i] - self.mean[i]) / self.sd;
                -0.5 * z * z - norm - self.mass[i].ln()
            })
            .sum()
    }

    pub fn density(&self, theta: &ControllerParams) -> f64 {
        self.log_density(theta).exp()
    }
}

/// Deterministic per-draw generator: one ChaCha stream per index.
pub fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One draw from the unit-covariance proposal centred at `theta_hat`.
pub fn propose(theta_hat: &ControllerParams, rng_seed: u64) -> ControllerParams {
    TruncatedNormalProposal::new(theta_hat, 1.0).sample(&mut draw_rng(rng_seed, 0))
}

/// `exp(-f(theta)) / q(theta; theta_hat)`, zero for infeasible `theta`.
pub fn importance_weight(
    theta: &ControllerParams,
    scenario: &Scenario,
    gamma: &Hyperparams,
    theta_hat: &ControllerParams,
) -> Result<f64> {
    Ok(log_importance_weight(theta, scenario, gamma, &TruncatedNormalProposal::new(theta_hat, 1.0))?.exp())
}

pub fn log_importance_weight(
    theta: &ControllerParams,
    scenario: &Scenario,
    gamma: &Hyperparams,
    proposal: &TruncatedNormalProposal,
) -> Result<f64> {
    let f = neg_log_likelihood(scenario, theta, gamma)?.total;
    Ok(-f - proposal.log_density(theta))
}

/// Sampled parameters, their rollouts and normalized probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTrajectorySet {
    pub thetas: Vec<ControllerParams>,
    pub trajectories: Vec<Vec<VehicleState>>,
    pub probabilities: Vec<f64>,
    pub effective_sample_size: f64,
    /// Every draw was infeasible and the set collapsed onto the estimate.
    #[serde(default)]
    pub degenerate: bool,
}

impl WeightedTrajectorySet {
    /// A single trajectory carrying all the probability mass.
    pub fn point(theta: ControllerParams, trajectory: Vec<VehicleState>) -> Self {
        Self {
            thetas: vec![theta],
            trajectories: vec![trajectory],
            probabilities: vec![1.0],
            effective_sample_size: 1.0,
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Vec::len)
    }

    /// Probability-weighted mean position at a prediction step.
    pub fn mean_position(&self, t_index: usize) -> f64 {
        self.probabilities
            .iter()
            .zip(&self.trajectories)
            .map(|(p, tr)| if *p > 0.0 { p * tr[t_index].x } else { 0.0 })
            .sum()
    }
}

/// Normalizes log-weights into probabilities and the effective sample size.
/// Returns `None` when every weight is zero.
pub fn normalize_log_weights(log_w: &[f64]) -> Option<(Vec<f64>, f64)> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|x| x * x).sum();
    let probs = w.iter().map(|x| x / sum).collect();
    Some((probs, sum * sum / sum_sq))
}

/// Lead states over the prediction horizon.
pub fn lead_future_provider(scenario: &Scenario, mode: LeadMode) -> Result<Vec<VehicleState>> {
    match mode {
        LeadMode::GroundTruth => {
            if scenario.lead_future.is_empty() {
                Err(Error::MissingLeadFuture)
            } else {
                Ok(scenario.lead_future.clone())
            }
        }
        LeadMode::ConstantVelocity => {
            let last = scenario.last_observed().ok_or(Error::EmptyObservation)?.lead;
            let v = scenario.observed.iter().map(|s| s.lead.v).sum::<f64>() / scenario.k() as f64;
            Ok((1..=scenario.horizon())
                .map(|j| VehicleState::new(last.x + v * j as f64 * scenario.dt, v))
                .collect())
        }
    }
}

/// Point estimate plus the weighted trajectory set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub solver: SolverResult,
    pub set: WeightedTrajectorySet,
    pub lead_mode: LeadMode,
}

/// Solve for the estimate, draw `n` parameter vectors around it, roll each
/// out against the lead trajectory and weight it against the likelihood.
pub fn predict(scenario: &Scenario, gamma: &Hyperparams, config: &SamplerConfig) -> Result<Prediction> {
    scenario.validate()?;
    let mut resolved = scenario.clone();
    resolved.lead_future = lead_future_provider(scenario, config.lead_mode)?;
    let scenario = &resolved;

    let system = assemble_system(scenario, gamma)?;
    let solver = solve_nonnegative(&system)?;
    let theta_hat = solver.theta_hat;
    let proposal = TruncatedNormalProposal::new(&theta_hat, config.proposal_sd);
    let start = scenario.last_observed().ok_or(Error::EmptyObservation)?.lag;

    let draws: Vec<(ControllerParams, Vec<VehicleState>, f64)> = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let theta = proposal.sample(&mut draw_rng(config.seed, i as u64));
            let traj = rollout(scenario, &theta, start);
            let feasible = rollout_is_feasible(&traj);
            let f = neg_log_likelihood_given_feasibility(scenario, &theta, gamma, feasible)?.total;
            Ok((theta, traj, -f - proposal.log_density(&theta)))
        })
        .collect::<Result<_>>()?;

    let log_w: Vec<f64> = draws.iter().map(|d| d.2).collect();
    let set = match normalize_log_weights(&log_w) {
        Some((probabilities, ess)) => {
            let (thetas, trajectories) = draws.into_iter().map(|(t, tr, _)| (t, tr)).unzip();
            WeightedTrajectorySet {
                thetas,
                trajectories,
                probabilities,
                effective_sample_size: ess,
                degenerate: false,
            }
        }
        None => {
            let traj = rollout(scenario, &theta_hat, start);
            if !rollout_is_feasible(&traj) {
                return Err(Error::AllWeightsZero);
            }
            log::warn!("all {} draws infeasible; collapsing onto the point estimate", config.n);
            let mut set = WeightedTrajectorySet::point(theta_hat, traj);
            set.degenerate = true;
            set
        }
    };
    Ok(Prediction {
        solver,
        set,
        lead_mode: config.lead_mode,
    })
}
