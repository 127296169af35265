//! JSON run configuration: one schema covering the model and the training
//! loop, with dotted-key command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Load a config file. The file may be partial at any depth: absent
    /// fields — including inside nested sections like `model.rgb` — keep
    /// their defaults. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let patch: serde_json::Value = serde_json::from_str(&text)?;
        let mut value = serde_json::to_value(Config::default())?;
        deep_merge(&mut value, patch);
        Ok(serde_json::from_value(value)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Apply `key=value` overrides, keys dotted into the schema
    /// (`train.learning_rate=0.01`, `model.cell=gru`, `model.fc=[8,4,1]`).
    /// Values parse as JSON, falling back to a bare string. Unknown keys and
    /// ill-typed values are rejected.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut value = serde_json::to_value(&*self)?;
        for kv in sets {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
            let leaf = raw
                .parse::<serde_json::Value>()
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = leaf;
        }
        *self = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("bad override value: {e}")))?;
        Ok(())
    }
}

/// Overlay `patch` onto `base`: objects merge key-by-key recursively, every
/// other value (arrays included) replaces the slot outright. Keys the schema
/// does not know survive the merge and are rejected at deserialization.
fn deep_merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                deep_merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}
