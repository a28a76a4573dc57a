//! JSON manifest of extracted or generated scenarios.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Scenario;

/// Where an extracted scenario came from in the source table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub merge_id: u64,
    pub lag_id: u64,
    pub lead_id: u64,
    pub merge_frame: i64,
    pub observe_start_frame: i64,
    pub window_start_frame: i64,
    pub window_end_frame: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScenarioManifest {
    pub source: String,
    pub scenarios: Vec<ScenarioRecord>,
    /// Candidate pairs dropped during extraction, by reason.
    #[serde(default)]
    pub skipped: BTreeMap<String, usize>,
}

impl ScenarioManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}
