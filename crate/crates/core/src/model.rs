//! State and parameter types, the interaction controller, and the
//! discrete-time longitudinal dynamics of the lag vehicle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sampling period, matching 10 Hz trajectory recordings.
pub const DEFAULT_DT: f64 = 0.1;

/// Longitudinal position (m) and velocity (m/s) of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, v: f64) -> Self {
        Self { x, v }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.v.is_finite()
    }
}

/// Lag and lead vehicle states at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub lag: VehicleState,
    pub lead: VehicleState,
}

impl JointState {
    pub fn new(lag: VehicleState, lead: VehicleState) -> Self {
        Self { lag, lead }
    }
}

/// Car-following controller parameters: speed-matching gain (1/s),
/// gap-tracking gain (1/s^2) and desired gap (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub k_v: f64,
    pub k_g: f64,
    pub g_star: f64,
}

impl ControllerParams {
    pub fn new(k_v: f64, k_g: f64, g_star: f64) -> Self {
        Self { k_v, k_g, g_star }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.k_v, self.k_g, self.g_star]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_nonnegative(&self) -> bool {
        self.k_v >= 0.0 && self.k_g >= 0.0 && self.g_star >= 0.0
    }
}

/// Prior hyperparameters. The acceleration noise variance is pinned to one;
/// the precisions are expressed relative to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Precision of the desired-gap prior (1/m^2).
    pub alpha: f64,
    /// Prior mean gap (m).
    pub g0: f64,
    /// Gain shrinkage weight.
    pub beta: f64,
    pub sigma_a_sq: f64,
}

impl Hyperparams {
    pub fn new(alpha: f64, g0: f64, beta: f64) -> Self {
        Self {
            alpha,
            g0,
            beta,
            sigma_a_sq: 1.0,
        }
    }
}

/// One lead/lag pair: `k` observed joint states followed by a prediction
/// horizon of `T - k` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dt: f64,
    pub lead_length: f64,
    pub observed: Vec<JointState>,
    /// Lead states for t = k+1..T. May be empty when only the lag truth is known.
    #[serde(default)]
    pub lead_future: Vec<VehicleState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_lag_future: Option<Vec<VehicleState>>,
}

impl Scenario {
    /// Number of observed timesteps.
    pub fn k(&self) -> usize {
        self.observed.len()
    }

    /// Number of predicted timesteps, `T - k`.
    pub fn horizon(&self) -> usize {
        if !self.lead_future.is_empty() {
            self.lead_future.len()
        } else {
            self.truth_lag_future.as_ref().map_or(0, Vec::len)
        }
    }

    pub fn last_observed(&self) -> Option<&JointState> {
        self.observed.last()
    }

    pub fn observed_gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.observed.iter().map(move |s| gap(s, self.lead_length))
    }

    pub fn lag_velocities(&self) -> Vec<f64> {
        self.observed.iter().map(|s| s.lag.v).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.observed.len() < 2 {
            return Err(Error::SequenceTooShort {
                needed: 2,
                got: self.observed.len(),
            });
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidScenario(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.lead_length > 0.0 && self.lead_length.is_finite()) {
            return Err(Error::InvalidScenario(format!(
                "lead length must be positive, got {}",
                self.lead_length
            )));
        }
        if self
            .observed
            .iter()
            .any(|s| !s.lag.is_finite() || !s.lead.is_finite())
        {
            return Err(Error::InvalidScenario("non-finite observed state".into()));
        }
        let horizon = self.horizon();
        if horizon == 0 {
            return Err(Error::InvalidScenario("prediction horizon is empty".into()));
        }
        if let Some(truth) = &self.truth_lag_future {
            if !self.lead_future.is_empty() && truth.len() != horizon {
                return Err(Error::InvalidScenario(format!(
                    "truth length {} does not match lead future length {}",
                    truth.len(),
                    horizon
                )));
            }
        }
        if self.observed.len() < 4 {
            log::warn!(
                "only {} observations; at least 4 are recommended",
                self.observed.len()
            );
        }
        Ok(())
    }
}

/// Bumper-to-bumper gap, negative when the vehicles overlap.
pub fn gap(s: &JointState, lead_length: f64) -> f64 {
    s.lead.x - s.lag.x - lead_length
}

/// Lag acceleration commanded by the controller.
pub fn controller_accel(s: &JointState, theta: &ControllerParams, lead_length: f64) -> f64 {
    theta.k_v * (s.lead.v - s.lag.v) + theta.k_g * (gap(s, lead_length) - theta.g_star)
}

/// Constant-acceleration update over one timestep.
pub fn step_lag(s: VehicleState, a: f64, dt: f64) -> VehicleState {
    VehicleState {
        x: s.x + s.v * dt + a * dt * dt / 2.0,
        v: s.v + a * dt,
    }
}

/// Rolls the lag vehicle forward from `start` (its state at t = k) through
/// the scenario horizon, treating the lead trajectory as an exogenous input.
pub fn rollout(scenario: &Scenario, theta: &ControllerParams, start: VehicleState) -> Vec<VehicleState> {
    let lead_now = scenario
        .last_observed()
        .map(|s| s.lead)
        .unwrap_or(VehicleState::new(f64::NAN, f64::NAN));
    rollout_with_lead(
        lead_now,
        &scenario.lead_future,
        scenario.horizon(),
        theta,
        start,
        scenario.lead_length,
        scenario.dt,
    )
}

/// Rollout against an explicit lead trajectory. The acceleration applied
/// between t and t+1 uses the lead state at t, so step `j` consumes
/// `lead_now` for j = 0 and `lead_future[j - 1]` afterwards.
pub fn rollout_with_lead(
    lead_now: VehicleState,
    lead_future: &[VehicleState],
    horizon: usize,
    theta: &ControllerParams,
    start: VehicleState,
    lead_length: f64,
    dt: f64,
) -> Vec<VehicleState> {
    let mut out = Vec::with_capacity(horizon);
    let mut lag = start;
    let mut lead = lead_now;
    for j in 0..horizon {
        if j > 0 {
            lead = lead_future[j - 1];
        }
        let a = controller_accel(&JointState::new(lag, lead), theta, lead_length);
        lag = step_lag(lag, a, dt);
        out.push(lag);
    }
    out
}

/// Forward differences of a velocity sequence.
pub fn finite_diff_accels(lag_velocities: &[f64], dt: f64) -> Result<Vec<f64>> {
    if lag_velocities.len() < 2 {
        return Err(Error::SequenceTooShort {
            needed: 2,
            got: lag_velocities.len(),
        });
    }
    Ok(lag_velocities.windows(2).map(|w| (w[1] - w[0]) / dt).collect())
}
