use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::error::{DmpoError, Result};
use crate::meanflow::Stage1Config;
use crate::nn::NetConfig;
use crate::ppo::Stage2Config;

/// Everything a pipeline run needs. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    /// JSONL demonstrations; the CLI flag takes precedence.
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub net: NetConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvKind::PointReach,
            dataset: None,
            output_dir: PathBuf::from("runs"),
            net: NetConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net
            .validate()
            .map_err(|e| DmpoError::Config(format!("net: {e}")))?;
        self.stage1.validate()?;
        self.stage2.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| DmpoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    /// Writes the fully resolved config to `dir/config.json`.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}
