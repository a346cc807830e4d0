//! Model configuration files: a human-readable JSON document mirroring
//! every architectural field, plus the named presets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mlla_core::network::{ModelConfig, SkipFusion};

use crate::error::{CliError, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct ConfigFile {
    pub name: String,
    pub input_size: usize,
    pub in_channels: usize,
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub depths: Vec<usize>,
    pub classes: usize,
    /// "add" or "concat"
    pub skip_fusion: String,
}

impl From<&ModelConfig> for ConfigFile {
    fn from(c: &ModelConfig) -> Self {
        ConfigFile {
            name: c.name.clone(),
            input_size: c.input_size,
            in_channels: c.in_channels,
            dims: c.dims.clone(),
            heads: c.heads.clone(),
            depths: c.depths.clone(),
            classes: c.classes,
            skip_fusion: match c.skip_fusion {
                SkipFusion::Add => "add".into(),
                SkipFusion::Concat => "concat".into(),
            },
        }
    }
}

impl ConfigFile {
    pub fn into_model_config(self) -> Result<ModelConfig> {
        let skip_fusion = match self.skip_fusion.as_str() {
            "add" => SkipFusion::Add,
            "concat" => SkipFusion::Concat,
            other => {
                return Err(CliError::Validation(format!(
                    "skip_fusion must be 'add' or 'concat', got '{other}'"
                )))
            }
        };
        let cfg = ModelConfig {
            name: self.name,
            input_size: self.input_size,
            in_channels: self.in_channels,
            dims: self.dims,
            heads: self.heads,
            depths: self.depths,
            classes: self.classes,
            skip_fusion,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolve `--config`: a preset name or a path to a JSON document.
pub fn load_config(spec: &str) -> Result<ModelConfig> {
    if let Some(preset) = ModelConfig::preset(spec) {
        return Ok(preset);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "'{spec}' is neither a preset ({}) nor an existing config file",
            ModelConfig::preset_names().join(", ")
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(spec, e))?;
    let file: ConfigFile =
        serde_json::from_str(&text).map_err(|e| CliError::format("config", e.to_string()))?;
    file.into_model_config()
}

pub fn save_config(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<()> {
    let file = ConfigFile::from(cfg);
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| CliError::format("config", e.to_string()))?;
    fs::write(path.as_ref(), text)
        .map_err(|e| CliError::io(path.as_ref().display().to_string(), e))?;
    Ok(())
}
