//! Per-vehicle trajectory tables read from CSV.
//!
//! Expected header: `vehicle_id,frame,lane_id,position,velocity,length`.
//! The NGSIM names `Vehicle_ID,Frame_ID,Lane_ID,Local_Y,v_Vel,v_Length`
//! are accepted as well; other columns are ignored.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FEET_TO_METERS: f64 = 0.3048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Meters,
    Feet,
}

impl Units {
    pub fn to_meters(self) -> f64 {
        match self {
            Units::Meters => 1.0,
            Units::Feet => FEET_TO_METERS,
        }
    }
}

impl FromStr for Units {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m" | "meters" | "metres" => Ok(Units::Meters),
            "ft" | "feet" => Ok(Units::Feet),
            _ => Err(Error::Unit(s.to_string())),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRow {
    #[serde(alias = "Vehicle_ID")]
    vehicle_id: u64,
    #[serde(alias = "Frame_ID")]
    frame: i64,
    #[serde(alias = "Lane_ID")]
    lane_id: i64,
    #[serde(alias = "Local_Y")]
    position: f64,
    #[serde(alias = "v_Vel")]
    velocity: f64,
    #[serde(alias = "v_Length")]
    length: f64,
}

/// One vehicle at one frame, in meters and meters per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub lane: i64,
    pub x: f64,
    pub v: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryTable {
    pub dt: f64,
    pub vehicles: BTreeMap<u64, BTreeMap<i64, Row>>,
}

impl TrajectoryTable {
    pub fn row(&self, vehicle: u64, frame: i64) -> Option<&Row> {
        self.vehicles.get(&vehicle)?.get(&frame)
    }

    /// `(vehicle, row)` for every vehicle present at `frame` in `lane`.
    pub fn in_lane(&self, frame: i64, lane: i64) -> impl Iterator<Item = (u64, &Row)> + '_ {
        self.vehicles
            .iter()
            .filter_map(move |(id, rows)| rows.get(&frame).filter(|r| r.lane == lane).map(|r| (*id, r)))
    }
}

pub fn parse_table(path: &Path, units: Units, frame_hz: f64) -> Result<TrajectoryTable> {
    parse_reader(std::fs::File::open(path)?, units, frame_hz)
}

pub fn parse_reader<R: Read>(reader: R, units: Units, frame_hz: f64) -> Result<TrajectoryTable> {
    if !(frame_hz > 0.0 && frame_hz.is_finite()) {
        return Err(Error::InvalidScenario(format!("frame rate must be positive, got {frame_hz}")));
    }
    let scale = units.to_meters();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut vehicles: BTreeMap<u64, BTreeMap<i64, Row>> = BTreeMap::new();
    let mut last_frame: HashMap<u64, i64> = HashMap::new();
    let headers = rdr.headers()?.clone();
    let mut rec = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut rec).map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = rec.position().map_or(0, |p| p.line());
        let raw: RawRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if let Some(prev) = last_frame.insert(raw.vehicle_id, raw.frame) {
            if raw.frame <= prev {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "vehicle {}: frame {} does not follow frame {}",
                        raw.vehicle_id, raw.frame, prev
                    ),
                });
            }
        }
        vehicles.entry(raw.vehicle_id).or_default().insert(
            raw.frame,
            Row {
                lane: raw.lane_id,
                x: raw.position * scale,
                v: raw.velocity * scale,
                length: raw.length * scale,
            },
        );
    }
    Ok(TrajectoryTable {
        dt: 1.0 / frame_hz,
        vehicles,
    })
}
