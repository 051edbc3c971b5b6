//! Scenario files: TOML with flat dotted keys, strict about unknown fields.
//! The full schema is documented in docs/scenario.md; every physical
//! parameter defaults to the standard two-zone setup (200 m zones, 1.8 s
//! spacing rule, ±4 m/s² control bounds, alpha = 0.0625).

use crate::HarnessError;
use czflow_core::ScenarioConfig;
use sha2::{Digest, Sha256};
use std::path::Path;

pub fn parse_scenario(path: &Path) -> Result<ScenarioConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Runtime(format!("reading {}: {e}", path.display())))?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<ScenarioConfig, HarnessError> {
    let config: ScenarioConfig =
        toml::from_str(text).map_err(|e| HarnessError::Config(format!("scenario parse: {e}")))?;
    config.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(config)
}

pub fn serialize_scenario(config: &ScenarioConfig) -> String {
    toml::to_string_pretty(config).expect("scenario serializes")
}

/// Hash of the canonical serialized form, embedded in reports so a result
/// file pins the exact scenario it came from.
pub fn scenario_hash(config: &ScenarioConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serialize_scenario(config).as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
