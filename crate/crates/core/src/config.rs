//! Training configuration: a TOML file whose keys mirror [`TrainConfig`].
//!
//! Unknown keys are rejected by name (a typo in an augmentation probability
//! would otherwise silently fall back to its default).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Seeds parameter init and batch order; augmentation uses `aug.global_seed`.
    pub seed: u64,
    /// Square training resolution, a multiple of 32.
    pub input_size: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub checkpoint_dir: PathBuf,
    pub aug: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            epochs: 100,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            seed: 0,
            input_size: 128,
            max_steps: None,
            checkpoint_dir: PathBuf::from("runs"),
            aug: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.manifest.as_os_str().is_empty() {
            return Err(invalid("manifest", "required"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", format!("must lie in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(invalid("grad_clip", format!("must be >= 0, got {}", self.grad_clip)));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(invalid("input_size", format!("must be a positive multiple of 32, got {}", self.input_size)));
        }
        if self.max_steps == Some(0) {
            return Err(invalid("max_steps", "must be positive"));
        }
        self.aug.validate()?;
        self.model.validate()
    }

    /// The effective configuration as TOML, enough to reproduce a run.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Every key path the schema accepts, optional fields included.
fn schema() -> toml::Value {
    let mut full = TrainConfig { max_steps: Some(1), ..Default::default() };
    full.model.fusion_dim = Some(1);
    toml::Value::try_from(&full).expect("config serializes")
}

fn first_unknown(v: &toml::Value, schema: &toml::Value, prefix: &str) -> Option<String> {
    let (toml::Value::Table(t), toml::Value::Table(s)) = (v, schema) else {
        return None;
    };
    for (k, sub) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match s.get(k) {
            None => return Some(path),
            Some(ss) => {
                if let Some(u) = first_unknown(sub, ss, &path) {
                    return Some(u);
                }
            }
        }
    }
    None
}

/// Parses TOML text. Relative paths are kept as written.
pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let value: toml::Value =
        toml::from_str(text).map_err(|e| invalid("<syntax>", e.message().to_string()))?;
    if let Some(key) = first_unknown(&value, &schema(), "") {
        return Err(Error::UnknownKey(key));
    }
    let cfg: TrainConfig = value.try_into().map_err(|e: toml::de::Error| invalid("<value>", e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, validates and resolves a config file: relative `manifest` and
/// `checkpoint_dir` are taken relative to the file's directory.
pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.manifest, &mut cfg.checkpoint_dir] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}
