//! Layered configuration: built-in preset defaults, then a TOML file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use siamtrack_core::data::Attribute;
use siamtrack_core::model::ModelConfig;
use siamtrack_core::tracker::TrackerConfig;
use siamtrack_core::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small backbone and short schedule for CPU runs.
    #[default]
    Desk,
    /// Full-size crops and the 50-epoch schedule.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub length: usize,
    pub width: usize,
    pub height: usize,
    /// Applied to every sequence; empty selects a fixed mix of attributes.
    pub attributes: Vec<Attribute>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 8,
            length: 100,
            width: 128,
            height: 128,
            attributes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub preset: Preset,
    /// Row label in ablation tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Model used by this configuration in ablation runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub synth: SynthConfig,
}

impl CliConfig {
    pub fn defaults(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Desk => (ModelConfig::desk(), TrainConfig::default()),
            Preset::Full => (ModelConfig::full(), TrainConfig::full()),
        };
        CliConfig {
            seed: None,
            preset,
            name: None,
            checkpoint: None,
            model,
            train,
            tracker: TrackerConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    /// Reads `path` over the defaults of its preset (or `preset`, which wins).
    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::data(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let file_preset = match file.get("preset") {
            Some(v) => Some(
                v.clone()
                    .try_into::<Preset>()
                    .map_err(|e| CliError::usage(format!("config key `preset`: {e}")))?,
            ),
            None => None,
        };
        let preset = preset.or(file_preset).unwrap_or_default();
        let base = toml::Table::try_from(CliConfig::defaults(preset))
            .map_err(|e| CliError::usage(format!("default config: {e}")))?;
        let mut merged = base;
        merge(&mut merged, file);
        merged.insert("preset".into(), toml::Value::try_from(preset).expect("enum serializes"));
        let where_ = path.map(|p| p.display().to_string()).unwrap_or_else(|| "defaults".into());
        let cfg: CliConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage(format!("config {where_}: {}", e.message())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

/// Recursively overlays `over` onto `base`; non-table values replace.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
