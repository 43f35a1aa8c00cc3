//! Run configuration: a JSON document plus dotted-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bas_core::inference::DEFAULT_TAU;
use bas_core::losses::LossWeights;
use bas_core::model::{BackboneSpec, MaskingLevel};
use bas_core::optim::SgdConfig;
use bas_core::synth::SyntheticConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated shapes, materialized under `root` on first use.
    #[default]
    Synthetic,
    /// CUB-200-2011 file layout.
    Cub,
    /// One sub-directory per category, no boxes.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub root: PathBuf,
    /// Network input side after resize and crop.
    pub input_size: usize,
    pub flip: bool,
    /// Used when `source` is synthetic and `root` holds no data yet.
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            root: PathBuf::from("data/synthetic"),
            input_size: 224,
            flip: true,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub split_point: String,
    pub masking: MaskingLevel,
    pub head_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 256],
            convs_per_stage: 2,
            split_point: "stage3".into(),
            masking: MaskingLevel::Feature,
            head_relu: true,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self, input_size: usize, num_categories: usize) -> BackboneSpec {
        let mut spec = BackboneSpec::with_widths(input_size, &self.widths, &self.split_point, num_categories);
        for s in &mut spec.stages {
            s.convs = self.convs_per_stage;
        }
        spec.head_relu = self.head_relu;
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    #[default]
    GtKnown,
    Top1,
    Top5,
}

impl ProtocolKind {
    pub fn protocol(self, gt: usize) -> bas_core::inference::Protocol {
        use bas_core::inference::Protocol;
        match self {
            ProtocolKind::GtKnown => Protocol::GtKnown(gt),
            ProtocolKind::Top1 => Protocol::Top1,
            ProtocolKind::Top5 => Protocol::Top5,
        }
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gt_known" | "gt-known" => ProtocolKind::GtKnown,
            "top1" => ProtocolKind::Top1,
            "top5" => ProtocolKind::Top5,
            _ => bail!("unknown protocol `{s}` (expected gt_known, top1 or top5)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub tau: f64,
    pub protocol: ProtocolKind,
    /// Evaluate on the test split every this many epochs (0 = only at the end).
    pub every: usize,
    /// Ten-crop classification; localization always uses the center crop.
    pub ten_crop: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 1,
            tau: DEFAULT_TAU,
            protocol: ProtocolKind::GtKnown,
            every: 1,
            ten_crop: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps (for interrupted runs).
    pub max_steps: Option<u64>,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: SgdConfig::default(),
            epochs: 50,
            batch_size: 32,
            seed: 0,
            max_steps: None,
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Self::from_value(value, overrides)
    }

    /// Defaults with `overrides` applied.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_value(serde_json::to_value(RunConfig::default())?, overrides)
    }

    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies overrides to an already parsed configuration.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_value(serde_json::to_value(self)?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.dataset.input_size >= 8, "dataset.input_size must be at least 8");
        ensure!(self.eval.k >= 1, "eval.k must be at least 1");
        ensure!(self.eval.tau > 0.0 && self.eval.tau < 1.0, "eval.tau must lie in (0, 1)");
        ensure!(!self.model.widths.is_empty(), "model.widths must not be empty");
        self.loss.validate()?;
        Ok(())
    }
}

/// Sets `a.b.c=value` inside a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    ensure!(keys.iter().all(|k| !k.is_empty()), "empty key in override path `{path}`");
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .with_context(|| format!("`{key}` in `{path}` indexes an array but is not a number"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .with_context(|| format!("index {idx} out of range for array of {len} in `{path}`"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("`{}` in override `{path}` is not an object", keys[..i].join(".")),
        };
    }
    unreachable!("loop returns on the last key")
}
