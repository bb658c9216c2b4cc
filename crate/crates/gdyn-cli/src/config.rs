//! The training config file: one TOML document holding the architecture
//! (preset name or full table) and the per-stage hyperparameters, so a run
//! is reproducible from the file plus a seed.

use gdyn_net::ArchConfig;
use gdyn_run::{TrainDynConfig, TrainStaticConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub arch: ArchSpec,
    #[serde(default, rename = "static")]
    pub static_stage: TrainStaticConfig,
    #[serde(default)]
    pub dynamic: TrainDynConfig,
    /// Truncate the split to its first so-many frames.
    #[serde(default)]
    pub limit_frames: Option<usize>,
    /// Dataset split to train on.
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

/// `arch = "desk"` for a preset, or a full `[arch]` table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSpec {
    Preset(String),
    Custom(ArchConfig),
}

impl ArchSpec {
    pub fn resolve(&self) -> Result<ArchConfig, String> {
        let cfg = match self {
            ArchSpec::Preset(name) => match name.as_str() {
                "tiny" => ArchConfig::tiny(),
                "desk" => ArchConfig::desk(),
                "paper" => ArchConfig::paper(),
                other => return Err(format!("unknown arch preset '{other}' (tiny|desk|paper)")),
            },
            ArchSpec::Custom(cfg) => cfg.clone(),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

impl TrainConfigFile {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
