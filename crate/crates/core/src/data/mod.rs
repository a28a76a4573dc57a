//! Trajectory tables, merge-scenario extraction, synthetic scenarios and
//! the manifest format shared by the CLI subcommands.

pub mod extract;
pub mod manifest;
pub mod synth;
pub mod table;

pub use extract::{extract_merge_scenarios, ExtractConfig};
pub use manifest::{Provenance, ScenarioManifest, ScenarioRecord};
pub use synth::{synth_scenarios, SynthConfig};
pub use table::{parse_table, TrajectoryTable, Units};
