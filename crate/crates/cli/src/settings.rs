//! Run settings: built-in defaults, optionally overlaid by a JSON file, then
//! by command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use qplan::data::ExpertStyle;
use qplan::denoiser::{MlpConfig, TrainConfig};
use qplan::engine::{BaselineConfig, EngineConfig, ExecClock};
use qplan::schedule::ScheduleConfig;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    /// Number of expert demonstrations to generate.
    pub demos: usize,
    pub expert: ExpertStyle,
    pub seed: u64,
    /// Scenario whose start/goal distribution the demonstrations use.
    pub scenario: String,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            demos: 4000,
            expert: ExpertStyle::Straight,
            seed: 0,
            scenario: "reach".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub data: DataSettings,
    pub arch: MlpConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    pub baseline: BaselineConfig,
    pub clock: ExecClock,
}

impl Settings {
    /// Defaults, with `path` (if any) merged over them key by key.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let overlay: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut base = serde_json::to_value(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut base, overlay, "")?;
        serde_json::from_value(base).map_err(|e| e.to_string())
    }
}

/// Overlays `top` onto `base`. Objects merge recursively; a tagged object
/// whose `kind` changes replaces the old value wholesale, since its fields
/// belong to the other variant.
fn merge(base: &mut Value, top: Value, at: &str) -> std::result::Result<(), String> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            let switches_kind = t.get("kind").is_some_and(|k| b.get("kind") != Some(k));
            if switches_kind {
                *b = t;
                return Ok(());
            }
            for (key, value) in t {
                let path = if at.is_empty() {
                    key.clone()
                } else {
                    format!("{at}.{key}")
                };
                match b.get_mut(&key) {
                    Some(slot) => merge(slot, value, &path)?,
                    None => return Err(format!("unknown setting '{path}'")),
                }
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value;
            Ok(())
        }
    }
}
