use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::gan::GanConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Classifier on the original training split only.
    Baseline,
    /// Training split plus complements from a GAN trained on the same split.
    AugSameData,
    /// Training split plus complements from a GAN pretrained on a second
    /// dataset and then fine-tuned on the training split.
    AugPretrained,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Baseline, Regime::AugSameData, Regime::AugPretrained];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::AugSameData => "aug_same_data",
            Regime::AugPretrained => "aug_pretrained",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a dataset comes from: an existing manifest or the synthetic
/// benchmark generated into the experiment directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub manifest: Option<PathBuf>,
    /// Blob metadata (`blobs.csv`) for CAM localisation; found automatically
    /// for synthetic data.
    pub blobs: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

impl SourceConfig {
    pub fn is_set(&self) -> bool {
        self.manifest.is_some() || self.synth.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub primary: SourceConfig,
    /// Second dataset for GAN pretraining; required by `aug_pretrained`.
    pub pretrain: SourceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub batch_size: usize,
    /// Number of original/generated/difference triptychs written per GAN.
    pub difference_images: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            difference_images: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamConfig {
    pub enabled: bool,
    /// Overlay images written for the first validation positives.
    pub overlays: usize,
    pub alpha: f64,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            overlays: 8,
            alpha: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub resolution: usize,
    pub channels: usize,
    pub regimes: Vec<Regime>,
    pub data: DataConfig,
    pub gan: GanConfig,
    pub augment: AugmentConfig,
    pub classifier: ClassifierConfig,
    pub cam: CamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("experiment"),
            resolution: 224,
            channels: 3,
            regimes: Regime::ALL.to_vec(),
            data: DataConfig::default(),
            gan: GanConfig::default(),
            augment: AugmentConfig::default(),
            classifier: ClassifierConfig::default(),
            cam: CamConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(Error::Config("regimes must not be empty".into()));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if self.regimes[..i].contains(r) {
                return Err(Error::Config(format!("regime {r} listed twice")));
            }
        }
        if self.resolution < 8 || self.channels == 0 {
            return Err(Error::Config("resolution must be >= 8 and channels > 0".into()));
        }
        let check = |name: &str, s: &SourceConfig| -> Result<()> {
            if s.manifest.is_some() && s.synth.is_some() {
                return Err(Error::Config(format!(
                    "data.{name}: set either manifest or synth, not both"
                )));
            }
            Ok(())
        };
        check("primary", &self.data.primary)?;
        check("pretrain", &self.data.pretrain)?;
        if !self.data.primary.is_set() {
            return Err(Error::Config(
                "data.primary needs a manifest or a synth section".into(),
            ));
        }
        if self.regimes.contains(&Regime::AugPretrained) && !self.data.pretrain.is_set() {
            return Err(Error::Config(
                "regime aug_pretrained requires data.pretrain".into(),
            ));
        }
        if self.augment.batch_size == 0 {
            return Err(Error::Config("augment.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cam.alpha) {
            return Err(Error::Config("cam.alpha must lie in [0, 1]".into()));
        }
        self.gan.validate()?;
        self.classifier.validate()?;
        Ok(())
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for s in [&mut self.data.primary, &mut self.data.pretrain] {
            if let Some(p) = s.manifest.as_mut() {
                fix(p);
            }
            if let Some(p) = s.blobs.as_mut() {
                fix(p);
            }
        }
        if let Some(p) = self.classifier.pretrained.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses config text, applies `key=value` overrides and validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let parsed: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = apply_overrides(&parsed, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies dotted `key=value` overrides to any serialisable config. Each one
/// is type-checked against the fully defaulted value, and errors name the
/// offending key.
pub fn apply_overrides<C: Serialize + DeserializeOwned + Clone>(cfg: &C, overrides: &[String]) -> Result<C> {
    let mut current = cfg.clone();
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
        let key = key.trim();
        let mut tree = toml::Value::try_from(&current).map_err(|e| Error::Config(e.to_string()))?;
        set_dotted(&mut tree, key, raw.trim())?;
        current = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("--set {key}: {}", e.message())))?;
    }
    Ok(current)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config(&text, overrides).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn type_name(v: &toml::Value) -> &'static str {
    v.type_str()
}

fn set_dotted(tree: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("--set {key}: malformed key")));
    }
    let mut node = tree;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {} is not a table", parts[..i].join("."))))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let leaf = parts[parts.len() - 1];
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("--set {key}: parent is not a table")))?;
    let mut value = parse_value(raw);
    if let Some(old) = table.get(leaf) {
        value = match (old, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::String(_), v) if !v.is_str() => toml::Value::String(raw.to_string()),
            (old, v) if std::mem::discriminant(old) != std::mem::discriminant(&v) => {
                return Err(Error::Config(format!(
                    "--set {key}: expected {}, got {raw:?}",
                    type_name(old)
                )));
            }
            (_, v) => v,
        };
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

/// Hex sha256 of the JSON encoding of `value`, shortened to 16 characters.
pub fn content_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
}
