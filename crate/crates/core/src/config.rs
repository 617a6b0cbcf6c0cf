//! The run configuration: one TOML document covering every stage.
//!
//! Loading goes through a `toml::Value` tree so that `--set a.b=c` overrides
//! and the master `seed` can be applied before strict deserialization, which
//! rejects unknown keys anywhere in the tree.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::phantom::PhantomSpec;
use crate::pseudolabel::PseudoLabelConfig;
use crate::segnet::ModelConfig;
use crate::selftrain::TrainConfig;
use crate::volume::{NormalizeMode, VolumeFormat};

/// Environment variable that replaces `output_dir` from the file.
pub const OUTPUT_DIR_ENV: &str = "TOMOSEG_OUTPUT_DIR";

/// Serializes an `f32` through its shortest decimal form, so `0.1f32` is
/// written as `0.1` rather than `0.10000000149011612`.
pub(crate) fn short_f32<S: serde::Serializer>(v: &f32, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(v.to_string().parse().unwrap_or(*v as f64))
}

/// Sections whose `seed` defaults to the top-level one.
const SEEDED_SECTIONS: [&str; 3] = ["pseudolabel", "train", "phantom"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Input volume: a slice directory or a raw file with a TOML sidecar.
    pub input: Option<PathBuf>,
    pub format: VolumeFormat,
    pub normalize: NormalizeMode,
    /// Label volume used for evaluation.
    pub ground_truth: Option<PathBuf>,
    /// Stage-1 labels; defaults to the run's own `pseudo_labels.raw`.
    pub pseudo_labels: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            input: None,
            format: VolumeFormat::Auto,
            normalize: NormalizeMode::Percentile { p_lo: 0.5, p_hi: 99.5 },
            ground_truth: None,
            pseudo_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ground-truth classes left out of every metric.
    pub ignore: Vec<u8>,
    /// Slices to evaluate; empty means all.
    pub slices: Vec<usize>,
    /// Overlay PNGs are written for at most this many evaluated slices.
    pub max_overlays: usize,
    #[serde(serialize_with = "short_f32")]
    pub overlay_alpha: f32,
    /// Grad-CAM layer name, e.g. `dec0`, `bottleneck`, `enc1`.
    pub gradcam_layer: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ignore: vec![0],
            slices: Vec::new(),
            max_overlays: 4,
            overlay_alpha: 0.4,
            gradcam_layer: "dec0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Threads for inference over slices (eval, confusion). Training stays
    /// single-threaded so that runs are bit-reproducible.
    pub workers: usize,
    pub io: IoConfig,
    pub pseudolabel: PseudoLabelConfig,
    pub augment: AugmentPolicy,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            workers: 1,
            io: IoConfig::default(),
            pseudolabel: PseudoLabelConfig::default(),
            augment: AugmentPolicy::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            phantom: PhantomSpec::default(),
        }
    }
}

/// Parses the right-hand side of `--set`: any TOML value, or a bare string.
fn parse_override_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Builds a config from TOML text plus `key=value` overrides. The
    /// environment is not consulted; see [`RunConfig::load`].
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut root, k.trim(), parse_override_value(v.trim()))?;
        }
        let seed = root.get("seed").cloned().unwrap_or(Value::Integer(0));
        for section in SEEDED_SECTIONS {
            if let Value::Table(t) = root
                .entry(section.to_string())
                .or_insert_with(|| Value::Table(toml::Table::new()))
            {
                t.entry("seed".to_string()).or_insert_with(|| seed.clone());
            }
        }
        let cfg: RunConfig = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Reads a config file (or starts from defaults when `path` is `None`),
    /// then applies `TOMOSEG_OUTPUT_DIR` and the overrides, in that order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut all = Vec::new();
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            all.push(format!("output_dir={}", Value::String(dir)));
        }
        all.extend_from_slice(overrides);
        Self::from_toml(&text, &all)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Fully materialized TOML, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks shared by every training-related command.
    pub fn validate_training(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.train.num_slices != self.model.in_channels {
            return Err(Error::Config(format!(
                "train.num_slices ({}) must equal model.in_channels ({})",
                self.train.num_slices, self.model.in_channels
            )));
        }
        if self.pseudolabel.k > self.model.num_classes {
            return Err(Error::Config(format!(
                "pseudolabel.k ({}) exceeds model.num_classes ({})",
                self.pseudolabel.k, self.model.num_classes
            )));
        }
        Ok(())
    }
}
