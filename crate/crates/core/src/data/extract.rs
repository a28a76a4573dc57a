//! Lead/lag pairs around on-ramp merges.
//!
//! A merger is a vehicle whose lane switches from the ramp lane to the
//! target lane. At the merge frame the nearest target-lane vehicles ahead
//! and behind form the primary lead/lag pair; the lag and the vehicle
//! behind it form a second pair. For each pair the prediction window opens
//! when the merger first passes the lag and closes at the earlier of the
//! merge frame and the merger passing the lead. The `k` frames before the
//! window are the observations.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::manifest::{Provenance, ScenarioRecord};
use super::table::TrajectoryTable;
use crate::model::{JointState, Scenario, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub ramp_lane: i64,
    pub target_lane: i64,
    pub observe_seconds: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            ramp_lane: 7,
            target_lane: 6,
            observe_seconds: 3.2,
        }
    }
}

/// Extracted scenarios plus a count of skipped candidates per reason.
pub fn extract_merge_scenarios(
    table: &TrajectoryTable,
    config: &ExtractConfig,
) -> (Vec<ScenarioRecord>, BTreeMap<String, usize>) {
    let k = ((config.observe_seconds / table.dt).round() as i64).max(1);
    let mut out = Vec::new();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut skip = |why: &str| *skipped.entry(why.to_string()).or_default() += 1;

    for (&merger, rows) in &table.vehicles {
        let Some(merge_frame) = merge_frame(rows, config) else { continue };
        let mx = rows[&merge_frame].x;
        let target: Vec<(u64, f64)> = table
            .in_lane(merge_frame, config.target_lane)
            .filter(|(id, _)| *id != merger)
            .map(|(id, r)| (id, r.x))
            .collect();
        let nearest_behind = |x: f64| {
            target
                .iter()
                .filter(|(_, p)| *p < x)
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .copied()
        };
        let lead = target
            .iter()
            .filter(|(_, p)| *p > mx)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .copied();
        let (Some((lead_id, _)), Some((lag_id, lag_x))) = (lead, nearest_behind(mx)) else {
            skip("no_pair");
            continue;
        };
        let mut pairs = vec![(lead_id, lag_id)];
        if let Some((behind, _)) = nearest_behind(lag_x) {
            pairs.push((lag_id, behind));
        }

        for (lead_id, lag_id) in pairs {
            let Some(start) = crossing(table, merger, lag_id, merge_frame) else {
                skip("no_crossing");
                continue;
            };
            if !seen.insert((lag_id, start)) {
                skip("duplicate");
                continue;
            }
            let end = (start..=merge_frame)
                .find(|f| match (table.row(merger, *f), table.row(lead_id, *f)) {
                    (Some(m), Some(l)) => m.x > l.x,
                    _ => false,
                })
                .unwrap_or(merge_frame);
            let obs_start = start - k;
            let present = |id, range: std::ops::RangeInclusive<i64>| range.into_iter().all(|f| table.row(id, f).is_some());
            if !present(lead_id, obs_start..=start - 1) || !present(lag_id, obs_start..=start - 1) {
                skip("insufficient_observation");
                continue;
            }
            if !present(lead_id, start..=end) || !present(lag_id, start..=end) {
                skip("track_gap");
                continue;
            }
            let state = |id, f| {
                let r = table.row(id, f).unwrap();
                VehicleState::new(r.x, r.v)
            };
            let scenario = Scenario {
                dt: table.dt,
                lead_length: table.row(lead_id, start - 1).unwrap().length,
                observed: (obs_start..start)
                    .map(|f| JointState::new(state(lag_id, f), state(lead_id, f)))
                    .collect(),
                lead_future: (start..=end).map(|f| state(lead_id, f)).collect(),
                truth_lag_future: Some((start..=end).map(|f| state(lag_id, f)).collect()),
            };
            out.push(ScenarioRecord {
                id: format!("m{merger}-l{lag_id}-f{start}"),
                provenance: Some(Provenance {
                    merge_id: merger,
                    lag_id,
                    lead_id,
                    merge_frame,
                    observe_start_frame: obs_start,
                    window_start_frame: start,
                    window_end_frame: end,
                }),
                scenario,
            });
        }
    }
    (out, skipped)
}

/// First frame in the target lane directly after a ramp-lane frame.
fn merge_frame(rows: &BTreeMap<i64, crate::data::table::Row>, config: &ExtractConfig) -> Option<i64> {
    rows.iter()
        .zip(rows.iter().skip(1))
        .find(|((f0, r0), (f1, r1))| **f1 == **f0 + 1 && r0.lane == config.ramp_lane && r1.lane == config.target_lane)
        .map(|(_, (f, _))| *f)
}

/// First frame at or before `until` where the merger is ahead of `lag`
/// after having been at or behind it on the previous frame.
fn crossing(table: &TrajectoryTable, merger: u64, lag: u64, until: i64) -> Option<i64> {
    let rows = table.vehicles.get(&merger)?;
    let mut prev_behind = None;
    for (&f, m) in rows.range(..=until) {
        let Some(l) = table.row(lag, f) else {
            prev_behind = None;
            continue;
        };
        let ahead = m.x > l.x;
        if ahead && prev_behind == Some(true) {
            return Some(f);
        }
        prev_behind = Some(!ahead);
    }
    None
}
