//! The run configuration file: one TOML document with `[model]`, `[train]`,
//! `[split]` and `[cup]` tables. Relative paths resolve against the file's
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stack_unet::model::CascadeSpec;
use stack_unet::training::{TrainConfig, DEFAULT_LEARNING_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    /// Manifest splits when present, otherwise a grouped split.
    #[default]
    Auto,
    /// Use the manifest's split column as is.
    Manifest,
    Grouped,
    Kfold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub protocol: SplitProtocol,
    pub val_fraction: f64,
    pub k: usize,
    /// Fold held out for validation under `kfold`.
    pub fold: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { protocol: SplitProtocol::Auto, val_fraction: 0.2, k: 5, fold: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CupConfig {
    /// Disc model whose predictions define the cup crops; ground-truth discs
    /// are used when unset.
    pub disc_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default)]
    pub model: CascadeSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub cup: CupConfig,
}

#[derive(Debug)]
pub struct Loaded {
    pub config: RunConfig,
    /// `train.learning_rate` was absent and the default was filled in.
    pub defaulted_learning_rate: bool,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses and validates; the error names the offending field.
pub fn parse(text: &str, base_dir: &Path) -> Result<Loaded, String> {
    let raw: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
    let defaulted_learning_rate =
        !raw.get("train").and_then(|t| t.as_table()).is_some_and(|t| t.contains_key("learning_rate"));
    let mut config: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    config.model.validate().map_err(|e| format!("model: {e}"))?;
    config.train.validate().map_err(|e| format!("train.{e}"))?;
    let (h, w) = config.train.resolution;
    config.model.block.check_resolution(h, w).map_err(|e| format!("train.resolution: {e}"))?;
    let s = &config.split;
    if !(s.val_fraction > 0.0 && s.val_fraction < 1.0) {
        return Err("split.val_fraction: must lie in (0, 1)".into());
    }
    if s.protocol == SplitProtocol::Kfold && (s.k < 2 || s.fold >= s.k) {
        return Err("split.k/split.fold: need k >= 2 and fold < k".into());
    }
    if defaulted_learning_rate {
        config.train.learning_rate = DEFAULT_LEARNING_RATE;
    }
    config.manifest = resolve(base_dir, &config.manifest);
    config.out_dir = config.out_dir.map(|p| resolve(base_dir, &p));
    config.cup.disc_checkpoint = config.cup.disc_checkpoint.map(|p| resolve(base_dir, &p));
    Ok(Loaded { config, defaulted_learning_rate })
}

pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string(config).expect("config serializes")
}
