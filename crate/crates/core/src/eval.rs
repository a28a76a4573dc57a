//! Error and calibration metrics for weighted trajectory sets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControllerParams, Scenario, VehicleState};
use crate::sampler::WeightedTrajectorySet;

/// Prediction horizons reported by default, in seconds.
pub const DEFAULT_HORIZONS_S: [f64; 6] = [0.8, 1.6, 2.4, 3.2, 4.0, 4.8];
pub const DEFAULT_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn check_index(set: &WeightedTrajectorySet, truth: &[f64], t_index: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if t_index >= truth.len() || t_index >= set.horizon() {
        return Err(Error::MissingTruth { index: t_index });
    }
    Ok(())
}

/// Expected absolute position error at one prediction step.
pub fn ade(set: &WeightedTrajectorySet, truth: &[f64], t_index: usize) -> Result<f64> {
    check_index(set, truth, t_index)?;
    Ok(weighted(set, |x| (x - truth[t_index]).abs(), t_index))
}

/// Expected squared position error at one prediction step.
pub fn expected_sq_error(set: &WeightedTrajectorySet, truth: &[f64], t_index: usize) -> Result<f64> {
    check_index(set, truth, t_index)?;
    Ok(weighted(set, |x| (x - truth[t_index]).powi(2), t_index))
}

/// Root of the scenario-averaged expected squared error.
pub fn rmse(sets: &[&WeightedTrajectorySet], truths: &[&[f64]], t_index: usize) -> Result<f64> {
    if sets.is_empty() || sets.len() != truths.len() {
        return Err(Error::EmptyEvaluation);
    }
    let mut sum = 0.0;
    for (set, truth) in sets.iter().zip(truths) {
        sum += expected_sq_error(set, truth, t_index)?;
    }
    Ok((sum / sets.len() as f64).sqrt())
}

fn weighted(set: &WeightedTrajectorySet, f: impl Fn(f64) -> f64, t_index: usize) -> f64 {
    set.probabilities
        .iter()
        .zip(&set.trajectories)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, tr)| p * f(tr[t_index].x))
        .sum()
}

/// Predictive probability of a position at or below `x`.
pub fn predictive_cdf(set: &WeightedTrajectorySet, t_index: usize, x: f64) -> f64 {
    set.probabilities
        .iter()
        .zip(&set.trajectories)
        .filter(|(_, tr)| tr[t_index].x <= x)
        .map(|(p, _)| p)
        .sum::<f64>()
        .min(1.0)
}

/// Sum over levels of the squared gap between each nominal level and the
/// fraction of predictive CDF values at the truth that fall at or below it.
pub fn calibration_score(cdf_at_truth: &[f64], levels: &[f64]) -> Result<f64> {
    if cdf_at_truth.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = cdf_at_truth.len() as f64;
    Ok(levels
        .iter()
        .map(|&p| {
            let hit = cdf_at_truth.iter().filter(|&&f| f <= p).count() as f64 / n;
            (p - hit).powi(2)
        })
        .sum())
}

/// Constant-velocity extrapolation of the lag from its mean observed speed,
/// as a one-member set.
pub fn cv_baseline(scenario: &Scenario) -> Result<WeightedTrajectorySet> {
    let last = scenario.last_observed().ok_or(Error::EmptyObservation)?.lag;
    let v = scenario.lag_velocities().iter().sum::<f64>() / scenario.k() as f64;
    let traj = (1..=scenario.horizon())
        .map(|j| VehicleState::new(last.x + v * j as f64 * scenario.dt, v))
        .collect();
    Ok(WeightedTrajectorySet::point(ControllerParams::new(0.0, 0.0, 0.0), traj))
}

/// Prediction-step index of a horizon in seconds, `None` past the end.
pub fn horizon_index(t_seconds: f64, dt: f64, len: usize) -> Option<usize> {
    let j = (t_seconds / dt).round() as usize;
    (j >= 1 && j <= len).then(|| j - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonError {
    pub t_seconds: f64,
    pub abs_err: f64,
    pub sq_err: f64,
    pub cdf_at_truth: f64,
}

/// Per-scenario errors at each reachable horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEval {
    pub horizons: Vec<HorizonError>,
    pub predict_time_s: Option<f64>,
}

pub fn evaluate_scenario(
    set: &WeightedTrajectorySet,
    truth: &[f64],
    dt: f64,
    horizons_s: &[f64],
) -> Result<ScenarioEval> {
    let len = truth.len().min(set.horizon());
    let mut out = Vec::new();
    for &t in horizons_s {
        let Some(i) = horizon_index(t, dt, len) else { continue };
        out.push(HorizonError {
            t_seconds: t,
            abs_err: ade(set, truth, i)?,
            sq_err: expected_sq_error(set, truth, i)?,
            cdf_at_truth: predictive_cdf(set, i, truth[i]),
        });
    }
    Ok(ScenarioEval {
        horizons: out,
        predict_time_s: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub t_seconds: f64,
    pub n: usize,
    pub ade_m: f64,
    pub rmse_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    /// Pooled over every (scenario, horizon) pair; `None` with no pairs.
    pub calibration: Option<f64>,
    pub mean_predict_time_s: Option<f64>,
}

/// Averages per-scenario errors by horizon. Scenarios too short for a
/// horizon drop out of that horizon's count.
pub fn aggregate(evals: &[ScenarioEval], horizons_s: &[f64]) -> MetricsReport {
    let mut horizons = Vec::new();
    let mut cdfs = Vec::new();
    for &t in horizons_s {
        let hits: Vec<&HorizonError> = evals
            .iter()
            .flat_map(|e| e.horizons.iter().filter(|h| h.t_seconds == t))
            .collect();
        if hits.is_empty() {
            continue;
        }
        let n = hits.len();
        let ade_m = hits.iter().map(|h| h.abs_err).sum::<f64>() / n as f64;
        let rmse_m = (hits.iter().map(|h| h.sq_err).sum::<f64>() / n as f64).sqrt();
        debug_assert!(ade_m <= rmse_m * (1.0 + 1e-12) + 1e-12, "ADE {ade_m} > RMSE {rmse_m} at {t} s");
        cdfs.extend(hits.iter().map(|h| h.cdf_at_truth));
        horizons.push(HorizonMetrics { t_seconds: t, n, ade_m, rmse_m });
    }
    let times: Vec<f64> = evals.iter().filter_map(|e| e.predict_time_s).collect();
    MetricsReport {
        horizons,
        calibration: calibration_score(&cdfs, &DEFAULT_LEVELS).ok(),
        mean_predict_time_s: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
    }
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:>8} {:>6} {:>10} {:>10}\n", "t [s]", "N", "ADE [m]", "RMSE [m]");
        for h in &self.horizons {
            let _ = writeln!(s, "{:>8.1} {:>6} {:>10.3} {:>10.3}", h.t_seconds, h.n, h.ade_m, h.rmse_m);
        }
        match self.calibration {
            Some(c) => {
                let _ = writeln!(s, "calibration {c:.4}");
            }
            None => s.push_str("calibration -\n"),
        }
        if let Some(t) = self.mean_predict_time_s {
            let _ = writeln!(s, "mean predict time {:.2} ms", t * 1e3);
        }
        s
    }
}
