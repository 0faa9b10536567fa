use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::eval::Strategy;
use crate::layers::{InputSpec, LayerSpec, ModelSpec, ScaleMode};
use crate::optim::OptimizerConfig;

fn d_seed() -> u64 {
    42
}
fn d_dataset() -> String {
    "synth".into()
}
fn d_epochs() -> usize {
    15
}
fn d_model() -> ModelSpec {
    toy_cnn()
}
fn d_ratio() -> f64 {
    1.0
}
fn d_count() -> usize {
    1
}
fn d_stage_epochs() -> usize {
    5
}
fn d_rank() -> usize {
    2
}
fn d_alpha() -> f64 {
    4.0
}
fn d_warmup() -> usize {
    3
}
fn d_iters() -> usize {
    20
}

/// Two conv layers and a dense layer over `[1, 16, 40]` inputs.
pub fn toy_cnn() -> ModelSpec {
    ModelSpec {
        name: "toy_cnn".into(),
        input: InputSpec::Image,
        layers: vec![
            LayerSpec::Conv2d {
                channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
                expandable: true,
            },
            LayerSpec::Conv2d {
                channels: 8,
                kernel: 3,
                stride: 2,
                padding: 1,
                expandable: true,
            },
            LayerSpec::Dense {
                units: 16,
                expandable: true,
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropinSettings {
    /// Explicit layer indices; when empty, `layer_count` layers are sampled.
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default = "d_count")]
    pub layer_count: usize,
    #[serde(default = "d_ratio")]
    pub growth_ratio: f64,
    /// Std-dev of new weights. Omitted means the family's fan-based scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_sigma: Option<f64>,
    #[serde(default)]
    pub attention_scale: ScaleMode,
    /// Keep the classifier head trainable under the frozen policy.
    #[serde(default)]
    pub train_head: bool,
}

impl Default for DropinSettings {
    fn default() -> Self {
        DropinSettings {
            layers: Vec::new(),
            layer_count: d_count(),
            growth_ratio: d_ratio(),
            init_sigma: None,
            attention_scale: ScaleMode::default(),
            train_head: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlasticitySettings {
    #[serde(default = "d_stage_epochs")]
    pub epochs_per_stage: usize,
}

impl Default for PlasticitySettings {
    fn default() -> Self {
        PlasticitySettings {
            epochs_per_stage: d_stage_epochs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSettings {
    #[serde(default = "d_rank")]
    pub rank: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Weights to adapt; when empty, every 2-D weight whose smaller side is at
    /// least `rank`.
    #[serde(default)]
    pub targets: Vec<String>,
}

impl Default for LoraSettings {
    fn default() -> Self {
        LoraSettings {
            rank: d_rank(),
            alpha: d_alpha(),
            targets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSettings {
    #[serde(default = "d_warmup")]
    pub warmup: usize,
    #[serde(default = "d_iters")]
    pub iters: usize,
}

impl Default for TimingSettings {
    fn default() -> Self {
        TimingSettings {
            warmup: d_warmup(),
            iters: d_iters(),
        }
    }
}

/// Everything needed to run one experiment.
///
/// Epoch budget per strategy: `baseline` trains `epochs`; the dropin strategies
/// and `lora` train `pretrain_epochs` on the plain model, then `epochs` after
/// the change; `plasticity` trains `3 × plasticity.epochs_per_stage`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    pub strategy: Strategy,
    #[serde(default = "d_dataset")]
    pub dataset_name: String,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "d_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub data: SynthSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub dropin: DropinSettings,
    #[serde(default)]
    pub plasticity: PlasticitySettings,
    #[serde(default)]
    pub lora: LoraSettings,
    #[serde(default)]
    pub timing: TimingSettings,
}

impl ExperimentConfig {
    /// Default configuration for `strategy`.
    pub fn new(strategy: Strategy) -> Self {
        parse_config_str(&format!("strategy = \"{strategy}\"")).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.optimizer.validate()?;
        if self.model.layers.is_empty() {
            return Err(config_err("model.layers", "at least one layer is required"));
        }
        if self.timing.iters == 0 {
            return Err(config_err("timing.iters", "must be at least 1"));
        }
        if self.lora.rank == 0 {
            return Err(config_err("lora.rank", "must be at least 1"));
        }
        if !(self.dropin.growth_ratio.is_finite() && self.dropin.growth_ratio > 0.0) {
            return Err(config_err("dropin.growth_ratio", "must be positive"));
        }
        Ok(())
    }

    /// Total training epochs the configured strategy consumes.
    pub fn total_epochs(&self) -> usize {
        match self.strategy {
            Strategy::Baseline => self.epochs,
            Strategy::DropinFrozen | Strategy::DropinUnfrozen | Strategy::Lora => {
                self.pretrain_epochs + self.epochs
            }
            Strategy::Plasticity => 3 * self.plasticity.epochs_per_stage,
        }
    }

    /// Canonical TOML form with every default written out.
    pub fn to_canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }
}

fn config_err(key: &str, msg: &str) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

/// Parses TOML text, applying `key=value` overrides (dotted keys; values are
/// TOML literals, falling back to plain strings) before validation.
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
        key: "<syntax>".into(),
        msg: e.message().trim().to_string(),
    })?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| config_err(ov, "override must look like key=value"))?;
        set_path(&mut table, key.trim(), parse_literal(raw.trim()))?;
    }
    let de = toml::Value::Table(table);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        let key = match missing_field(&msg) {
            Some(f) if path == "." => f,
            Some(f) => format!("{path}.{f}"),
            None => path,
        };
        Error::Config { key, msg }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    parse_config_with(text, &[])
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    load_config(path, &[])
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_with(&text, overrides)
}

fn backticked(msg: &str, prefix: &str) -> Option<String> {
    let rest = &msg[msg.find(prefix)? + prefix.len()..];
    let end = rest.find('`')?;
    Some(rest[..end].to_string())
}

fn missing_field(msg: &str) -> Option<String> {
    backticked(msg, "missing field `")
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config_err(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(key, &format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
