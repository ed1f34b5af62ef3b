use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Written next to every run's outputs. Contains no timestamps so that
/// repeated runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, verbatim.
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub preset: Option<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// The fully resolved configuration the run used.
    pub config: Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_path: None,
            preset: None,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).map_err(CliError::internal)?;
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }
}
