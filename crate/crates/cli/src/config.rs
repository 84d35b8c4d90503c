use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use selg::separator::{ModelConfig, VariantSpec};
use selg::training::TrainConfig;

use crate::usage;

/// Reads a JSON config. Relative paths inside it are later resolved against its directory.
pub fn read<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

/// Reads a JSON config whose fields override `base`, recursing into nested objects.
pub fn read_over<T: Serialize + DeserializeOwned>(path: &Path, base: &T) -> anyhow::Result<T> {
    let patch: Value = read(path)?;
    let merged = overlay(serde_json::to_value(base)?, patch);
    serde_json::from_value(merged).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn overlay(base: Value, patch: Value) -> Value {
    match (base, patch) {
        (Value::Object(mut b), Value::Object(p)) => {
            for (k, v) in p {
                let merged = match b.remove(&k) {
                    Some(old) => overlay(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, p) => p,
    }
}

/// Training settings given in a run file override the desk schedule field by field.
fn train_over_desk<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    let patch = Value::deserialize(d)?;
    let base = serde_json::to_value(TrainConfig::desk()).map_err(D::Error::custom)?;
    serde_json::from_value(overlay(base, patch)).map_err(D::Error::custom)
}

pub fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    /// Corpus directory or manifest file.
    pub corpus: PathBuf,
    pub variant: VariantSpec,
    /// Model layout; the desk layout for `variant` when absent.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default = "TrainConfig::desk", deserialize_with = "train_over_desk")]
    pub train: TrainConfig,
    /// Lip-only checkpoint whose encoder supplies alignment targets for gesture-only runs.
    #[serde(default)]
    pub lip_teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRun {
    pub corpus: PathBuf,
    pub base_checkpoint: PathBuf,
    /// Must enable the alignment loss.
    pub variant: VariantSpec,
    #[serde(default = "TrainConfig::desk", deserialize_with = "train_over_desk")]
    pub train: TrainConfig,
    #[serde(default)]
    pub lip_teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub corpus: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Taken from the checkpoint metadata when absent.
    #[serde(default)]
    pub variant: Option<VariantSpec>,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
    #[serde(default = "default_range")]
    pub range: (f64, f64),
}

fn default_split() -> String {
    "test".into()
}

fn default_bin_width() -> f64 {
    2.0
}

fn default_range() -> (f64, f64) {
    (-30.0, 30.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportEntry {
    pub name: String,
    /// `report.json` written by `evaluate`, or its directory.
    pub report: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRun {
    pub runs: Vec<ReportEntry>,
}
