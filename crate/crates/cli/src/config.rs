//! Layered run configuration: preset, then JSON file, then flags.

use std::path::Path;

use nightprior::augment::AugConfig;
use nightprior::refine::RefineConfig;
use nightprior::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const PRESETS: [&str; 3] = ["toy", "paper-prior", "paper-refine"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub augment: AugConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "toy" => Ok(Self::default()),
            "paper-prior" => Ok(Self {
                train: TrainConfig::full_scale(),
                ..Self::default()
            }),
            "paper-refine" => Ok(Self {
                refine: RefineConfig::full_scale(),
                ..Self::default()
            }),
            other => Err(CliError::Usage(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Preset (or defaults) overlaid with the file, if any.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>) -> Result<Self, CliError> {
        let base = match preset {
            Some(p) => Self::preset(p)?,
            None => Self::default(),
        };
        let Some(path) = file else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Data(format!("cannot read config {}: {e}", path.display()))
        })?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        let mut merged = serde_json::to_value(&base).map_err(CliError::internal)?;
        merge(&mut merged, overlay);
        serde_json::from_value(merged)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))
    }
}

/// Recursive object merge. Tagged objects (with a `kind` key) in the
/// overlay replace the base wholesale so variants do not mix fields.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
