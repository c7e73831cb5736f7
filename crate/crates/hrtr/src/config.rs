//! Run configuration: a single TOML file resolved against optional named
//! presets, with CLI flags layered on top by the command handlers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HrtrError, Result};
use crate::loss::FocalSpec;
use crate::metrics::Aggregation;
use crate::optim::TrainConfig;
use crate::windowing::{SmoothSpec, WindowSpec};

pub const PRESET_NAMES: [&str; 3] = ["strokerehab-video", "strokerehab-imu", "salads50"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataPaths {
    pub features_dir: PathBuf,
    pub labels_dir: PathBuf,
    pub vocab_file: PathBuf,
    pub split_file: PathBuf,
}

/// Architecture keys; input_dim and num_classes come from the data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ArchSection {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SmoothSection {
    /// Smoothing kernel in frames; 0 disables smoothing.
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
pub struct EvalSection {
    #[serde(default)]
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub model: ArchSection,
    pub window: WindowSpec,
    pub smooth: SmoothSection,
    pub focal: FocalSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn smooth_spec(&self) -> Option<SmoothSpec> {
        (self.smooth.kernel > 0).then_some(SmoothSpec {
            kernel: self.smooth.kernel,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.focal.validate()?;
        self.train.validate()?;
        if self.model.embed_dim == 0
            || self.model.num_layers == 0
            || self.model.num_heads == 0
            || self.model.ffn_hidden == 0
        {
            return Err(HrtrError::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(HrtrError::Config("dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

fn preset_value(name: &str) -> Result<toml::Value> {
    // Paper operating points; data paths and output dir are always supplied
    // by the user's config or flags.
    const COMMON: &str = r#"
seed = 0
output_dir = "runs/out"

[data]
features_dir = "data/features"
labels_dir = "data/labels"
vocab_file = "data/vocab.txt"
split_file = "data/split.txt"

[model]
embed_dim = 1024
num_layers = 3
dropout = 0.2

[focal]
alpha = 25.0
gamma = 2.0

[train]
learning_rate = 1e-3
momentum = 0.9
weight_decay = 1e-4
plateau_factor = 0.01
plateau_patience = 5
min_lr = 1e-6
model_selection = "final"
plateau_monitor = "train_loss"
"#;
    let specific = match name {
        "strokerehab-video" => {
            r#"
[model]
num_heads = 4
ffn_hidden = 512

[window]
size = 200
stride = 10

[smooth]
kernel = 25

[train]
epochs = 25
batch_size = 8
clip_max_norm = 5.0
"#
        }
        "strokerehab-imu" => {
            r#"
[model]
num_heads = 4
ffn_hidden = 512

[window]
size = 500
stride = 10

[smooth]
kernel = 25

[train]
epochs = 25
batch_size = 8
clip_max_norm = 5.0
"#
        }
        "salads50" => {
            r#"
[model]
num_heads = 2
ffn_hidden = 256

[window]
size = 5000
stride = 500

[smooth]
kernel = 200

[train]
epochs = 10
batch_size = 2
clip_max_norm = 60.0
"#
        }
        other => {
            return Err(HrtrError::Config(format!(
                "unknown preset '{other}' (expected one of {PRESET_NAMES:?})"
            )))
        }
    };
    let mut base = parse_toml(COMMON)?;
    merge_value(&mut base, parse_toml(specific)?);
    Ok(base)
}

fn merge_value(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_toml(text: &str) -> Result<toml::Value> {
    text.parse::<toml::Value>()
        .map_err(|e| HrtrError::Config(format!("config parse error: {e}")))
}

/// Resolves a preset into a full `RunConfig`.
pub fn preset(name: &str) -> Result<RunConfig> {
    preset_value(name)?
        .try_into()
        .map_err(|e| HrtrError::Config(format!("preset '{name}': {e}")))
}

/// Loads a config file. An optional top-level `preset = "..."` key supplies
/// defaults; every other key in the file overrides the preset.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HrtrError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut user = parse_toml(&text)?;
    let preset_name = user
        .as_table_mut()
        .and_then(|t| t.remove("preset"))
        .map(|v| match v {
            toml::Value::String(s) => Ok(s),
            _ => Err(HrtrError::Config("preset key must be a string".into())),
        })
        .transpose()?;
    let merged = match preset_name {
        Some(name) => {
            let mut base = preset_value(&name)?;
            merge_value(&mut base, user);
            base
        }
        None => user,
    };
    let config: RunConfig = merged
        .try_into()
        .map_err(|e| HrtrError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{ModelSelection, PlateauMonitor};

    #[test]
    fn presets_encode_paper_hyperparameters() {
        let video = preset("strokerehab-video").unwrap();
        assert_eq!(video.model.embed_dim, 1024);
        assert_eq!(video.model.num_layers, 3);
        assert_eq!(video.model.num_heads, 4);
        assert_eq!(video.model.ffn_hidden, 512);
        assert_eq!(video.model.dropout, 0.2);
        assert_eq!(video.window, WindowSpec { size: 200, stride: 10 });
        assert_eq!(video.smooth.kernel, 25);
        assert_eq!(video.focal, FocalSpec { alpha: 25.0, gamma: 2.0 });
        assert_eq!(video.train.epochs, 25);
        assert_eq!(video.train.batch_size, 8);
        assert_eq!(video.train.learning_rate, 1e-3);
        assert_eq!(video.train.momentum, 0.9);
        assert_eq!(video.train.weight_decay, 1e-4);
        assert_eq!(video.train.plateau_factor, 0.01);
        assert_eq!(video.train.plateau_patience, 5);
        assert_eq!(video.train.clip_max_norm, 5.0);

        let imu = preset("strokerehab-imu").unwrap();
        assert_eq!(imu.window, WindowSpec { size: 500, stride: 10 });
        assert_eq!(imu.model.num_heads, 4);
        assert_eq!(imu.model.ffn_hidden, 512);
        assert_eq!(imu.smooth.kernel, 25);
        assert_eq!(imu.train.clip_max_norm, 5.0);

        let salads = preset("salads50").unwrap();
        assert_eq!(salads.window, WindowSpec { size: 5000, stride: 500 });
        assert_eq!(salads.model.num_heads, 2);
        assert_eq!(salads.model.ffn_hidden, 256);
        assert_eq!(salads.model.embed_dim, 1024);
        assert_eq!(salads.smooth.kernel, 200);
        assert_eq!(salads.train.epochs, 10);
        assert_eq!(salads.train.batch_size, 2);
        assert_eq!(salads.train.clip_max_norm, 60.0);
    }

    #[test]
    fn config_file_overrides_preset() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
preset = "strokerehab-video"
seed = 9

[window]
size = 100

[train]
epochs = 2
"#,
        )
        .unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.window, WindowSpec { size: 100, stride: 10 });
        assert_eq!(config.train.epochs, 2);
        assert_eq!(config.train.batch_size, 8); // untouched preset value
        assert_eq!(config.train.model_selection, ModelSelection::Final);
        assert_eq!(config.train.plateau_monitor, PlateauMonitor::TrainLoss);
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(preset("nope").is_err());
    }

    #[test]
    fn smooth_zero_disables() {
        let mut config = preset("strokerehab-video").unwrap();
        config.smooth.kernel = 0;
        assert!(config.smooth_spec().is_none());
        config.smooth.kernel = 25;
        assert_eq!(config.smooth_spec(), Some(SmoothSpec { kernel: 25 }));
    }
}
