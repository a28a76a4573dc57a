//! Synthetic merge scenarios with a known controller.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::ScenarioRecord;
use crate::error::{Error, Result};
use crate::model::{controller_accel, step_lag, ControllerParams, JointState, Scenario, VehicleState};
use crate::sampler::draw_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub observe_steps: usize,
    pub horizon_steps: usize,
    pub dt: f64,
    pub theta_star: ControllerParams,
    /// Standard deviation of the acceleration noise, m/s^2.
    pub noise_sd: f64,
    pub lead_length: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 100,
            observe_steps: 32,
            horizon_steps: 48,
            dt: 0.1,
            theta_star: ControllerParams::new(0.5, 0.2, 12.0),
            noise_sd: 0.1,
            lead_length: 4.5,
            seed: 0,
        }
    }
}

const MAX_ATTEMPTS: usize = 100;

/// Lead speed oscillates around a cruise speed; the lag starts off its
/// desired gap and follows `theta_star` with additive acceleration noise.
pub fn synth_scenarios(config: &SynthConfig) -> Result<Vec<ScenarioRecord>> {
    if config.observe_steps < 2 || config.horizon_steps == 0 {
        return Err(Error::InvalidScenario("need at least 2 observed and 1 predicted step".into()));
    }
    let positive = |x: f64| x > 0.0 && x.is_finite();
    if !positive(config.dt) || !positive(config.lead_length) || config.noise_sd.is_nan() || config.noise_sd < 0.0 {
        return Err(Error::InvalidScenario("dt, noise and lead length must be positive".into()));
    }
    let noise = Normal::new(0.0, config.noise_sd).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let total = config.observe_steps + config.horizon_steps;
    (0..config.n)
        .map(|i| {
            let mut rng = draw_rng(config.seed, i as u64);
            // Redraw until the lag never reverses; the stream stays per-scenario.
            for _ in 0..MAX_ATTEMPTS {
                let states = simulate(config, noise, total, &mut rng);
                if states.iter().all(|s| s.lag.v >= 0.0) {
                    let (obs, fut) = states.split_at(config.observe_steps);
                    return Ok(ScenarioRecord {
                        id: format!("synth-{i}"),
                        provenance: None,
                        scenario: Scenario {
                            dt: config.dt,
                            lead_length: config.lead_length,
                            observed: obs.to_vec(),
                            lead_future: fut.iter().map(|s| s.lead).collect(),
                            truth_lag_future: Some(fut.iter().map(|s| s.lag).collect()),
                        },
                    });
                }
            }
            Err(Error::InvalidScenario(format!(
                "scenario {i}: lag reversed in {MAX_ATTEMPTS} attempts; controller too aggressive"
            )))
        })
        .collect()
}

fn simulate<R: Rng>(config: &SynthConfig, noise: Normal<f64>, total: usize, rng: &mut R) -> Vec<JointState> {
    let v0 = rng.random_range(10.0..20.0);
    let amp = rng.random_range(2.0..5.0);
    let omega = rng.random_range(0.3..1.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let lead = |t: usize| {
        let tt = t as f64 * config.dt;
        VehicleState::new(
            100.0 + v0 * tt - amp / omega * ((omega * tt + phase).cos() - phase.cos()),
            v0 + amp * (omega * tt + phase).sin(),
        )
    };
    let gap0 = (config.theta_star.g_star + rng.random_range(-5.0..5.0)).max(2.0);
    let mut lag = VehicleState::new(
        100.0 - config.lead_length - gap0,
        (lead(0).v + rng.random_range(-2.0..2.0)).max(0.0),
    );
    let mut states = Vec::with_capacity(total);
    for t in 0..total {
        let s = JointState::new(lag, lead(t));
        states.push(s);
        let a = controller_accel(&s, &config.theta_star, config.lead_length) + noise.sample(rng);
        lag = step_lag(lag, a, config.dt);
    }
    states
}
