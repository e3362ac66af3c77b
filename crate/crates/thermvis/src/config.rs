//! Run configuration: one TOML document, overridable by `--set key=value`
//! and dedicated command-line flags (flags > file > defaults).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thermvis_core::crn::CrnConfig;
use thermvis_core::cx::LossConfig;
use thermvis_core::dataset::DEFAULT_DARK_THRESHOLD;
use thermvis_core::perceptual::InputNormalization;
use thermvis_core::train::{Direction, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub exclude_dark: bool,
    pub dark_threshold: f64,
    pub folds: FoldOptions,
    pub train: TrainOptions,
    pub loss: LossConfig,
    pub crn: CrnConfig,
    pub perceptual: PerceptualOptions,
    pub quality: QualityOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data/vis-th"),
            output_dir: PathBuf::from("runs/default"),
            exclude_dark: true,
            dark_threshold: DEFAULT_DARK_THRESHOLD,
            folds: FoldOptions::default(),
            train: TrainOptions::default(),
            loss: LossConfig::default(),
            crn: CrnConfig::default(),
            perceptual: PerceptualOptions::default(),
            quality: QualityOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldOptions {
    pub count: usize,
    pub seed: u64,
    /// Fold plan file; defaults to `<output_dir>/folds.json`.
    pub plan: Option<PathBuf>,
}

impl Default for FoldOptions {
    fn default() -> Self {
        Self {
            count: 10,
            seed: 0,
            plan: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub direction: Direction,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
            direction: t.direction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Caffe,
    Torchvision,
}

impl Normalization {
    pub fn input_normalization(self) -> InputNormalization {
        match self {
            Normalization::Caffe => InputNormalization::caffe(),
            Normalization::Torchvision => InputNormalization::torchvision(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualOptions {
    /// safetensors file with VGG19 convolution weights.
    pub weights_path: Option<PathBuf>,
    /// Expected hex SHA-256 of the weights file; checked when set.
    pub sha256: Option<String>,
    pub normalization: Normalization,
    /// Use randomly initialised weights from this seed instead of a file.
    /// Only meaningful for smoke tests.
    pub synthetic_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityOptions {
    /// Square size at which every image is scored.
    pub resolution: usize,
}

impl Default for QualityOptions {
    fn default() -> Self {
        Self { resolution: 128 }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.train.seed,
            direction: self.train.direction,
            loss: self.loss.clone(),
            crn: self.crn.clone(),
        }
    }

    /// Side length of preprocessed training images.
    pub fn network_resolution(&self) -> usize {
        self.crn.target_resolution
    }

    pub fn plan_path(&self) -> PathBuf {
        self.folds
            .plan
            .clone()
            .unwrap_or_else(|| self.output_dir.join("folds.json"))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.folds.count < 2 {
            return Err(Error::Config(format!(
                "folds.count must be at least 2, got {}",
                self.folds.count
            )));
        }
        if !(0.0..=1.0).contains(&self.dark_threshold) {
            return Err(Error::Config(format!(
                "dark_threshold {} outside [0, 1]",
                self.dark_threshold
            )));
        }
        if self.quality.resolution < 16 {
            return Err(Error::Config("quality.resolution must be at least 16".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises to TOML")
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses the right-hand side of `--set`: any TOML value, falling back to a
/// bare string.
fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Applies one `dotted.key=value` assignment.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Defaults, then the optional file, then each override in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialise");
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        merge(&mut table, file);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_regression() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.epochs, 40);
        assert_eq!(cfg.train.batch_size, 1);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.loss.lambda1, 0.01);
        assert_eq!(cfg.loss.lambda2, 0.99);
        assert_eq!(cfg.loss.source_layers, ["conv4_2"]);
        assert_eq!(cfg.loss.target_layers, ["conv3_2", "conv4_2"]);
        assert_eq!(cfg.folds.count, 10);
        assert_eq!(cfg.crn.target_resolution, 128);
        assert_eq!(cfg.crn.base_resolution, 4);
        assert_eq!(cfg.train.direction, Direction::ThermalToVisible);
        assert!(cfg.exclude_dark);
        assert_eq!(load_config(None, &[]).unwrap(), cfg);
    }

    #[test]
    fn precedence_is_overrides_then_file_then_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "output_dir = \"from-file\"\n[loss]\nlambda1 = 0.2\n[train]\nepochs = 3\n",
        )
        .unwrap();
        let cfg = load_config(
            Some(&path),
            &["train.epochs=5".into(), "loss.target_layers=[\"conv4_2\"]".into()],
        )
        .unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("from-file"));
        assert_eq!(cfg.loss.lambda1, 0.2);
        assert_eq!(cfg.loss.lambda2, 0.99);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.loss.target_layers, ["conv4_2"]);
    }

    #[test]
    fn bad_documents_are_rejected() {
        assert!(load_config(None, &["loss.lambda3=1".into()]).is_err());
        assert!(load_config(None, &["loss.h=-1".into()]).is_err());
        assert!(load_config(None, &["noequals".into()]).is_err());
        assert!(load_config(None, &["crn.target_resolution=96".into()]).is_err());
        let cfg = load_config(
            None,
            &["perceptual.sha256=abc123".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.perceptual.sha256.as_deref(), Some("abc123"));
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
