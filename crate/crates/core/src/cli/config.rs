use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use crate::attacks::{table_defaults, AttackSpec, NamedAttack, Norm};
use crate::dataio::{load_cifar10_binary, synth_toy_dataset_with, LabeledImageSet, ToyParams};
use crate::error::{AmocError, Result};
use crate::eval::EvalProtocol;
use crate::train::{FinetuneConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Toy,
    Cifar10,
}

/// Where training and evaluation images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// CIFAR-10 binary batch files, concatenated in order.
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    pub toy_train_seed: u64,
    pub toy_test_seed: u64,
    pub toy_train_size: usize,
    pub toy_test_size: usize,
    pub toy_classes: usize,
    pub toy_side: usize,
    pub toy: ToyParams,
    /// Evaluate on the first `max_test` test images (0 keeps all).
    pub max_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Toy,
            train_files: Vec::new(),
            test_files: Vec::new(),
            toy_train_seed: 1000,
            toy_test_seed: 2000,
            toy_train_size: 2000,
            toy_test_size: 500,
            toy_classes: 2,
            toy_side: 16,
            toy: ToyParams::default(),
            max_test: 0,
        }
    }
}

impl DatasetConfig {
    fn load_files(files: &[PathBuf]) -> Result<LabeledImageSet> {
        if files.is_empty() {
            return Err(AmocError::Config("dataset.kind = \"cifar10\" needs train_files and test_files".into()));
        }
        let sets = files.iter().map(load_cifar10_binary).collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = sets.iter().map(|s| s.images.view()).collect();
        let images = concatenate(Axis(0), &views).map_err(|e| AmocError::Internal(e.to_string()))?;
        let labels = sets.iter().flat_map(|s| s.labels.iter().copied()).collect();
        LabeledImageSet::new(images, labels, 10)
    }

    pub fn train(&self) -> Result<LabeledImageSet> {
        match self.kind {
            DatasetKind::Toy => synth_toy_dataset_with(self.toy_train_seed, self.toy_train_size, self.toy_classes, self.toy_side, &self.toy),
            DatasetKind::Cifar10 => Self::load_files(&self.train_files),
        }
    }

    pub fn test(&self) -> Result<LabeledImageSet> {
        let set = match self.kind {
            DatasetKind::Toy => synth_toy_dataset_with(self.toy_test_seed, self.toy_test_size, self.toy_classes, self.toy_side, &self.toy)?,
            DatasetKind::Cifar10 => Self::load_files(&self.test_files)?,
        };
        Ok(if self.max_test > 0 && self.max_test < set.len() { set.take(self.max_test) } else { set })
    }
}

/// Attack suite and ε-sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackEvalConfig {
    pub attacks: Vec<NamedAttack>,
    pub sweep_template: AttackSpec,
    pub sweep_eps: Vec<f64>,
}

impl Default for AttackEvalConfig {
    fn default() -> Self {
        Self {
            attacks: table_defaults(),
            sweep_template: AttackSpec { norm: Norm::Linf, ..AttackSpec::pgd20() },
            sweep_eps: (0..=8).map(|i| i as f64 / 255.0).collect(),
        }
    }
}

/// Everything one experiment needs, stored as a single TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub probe: EvalProtocol,
    pub eval: AttackEvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            probe: EvalProtocol::default(),
            eval: AttackEvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> AmocError {
    AmocError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AmocError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| AmocError::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the root seed of every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.finetune.seed = seed;
        self.probe.seed = seed;
    }

    /// Applies `key=value` overrides. The dotted key must name an existing
    /// field; the value is parsed as a TOML literal and falls back to a
    /// bare string.
    pub fn apply_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).map_err(config_err)?;
        for item in sets {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| AmocError::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let mut node = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| AmocError::Config(format!("{key}: {} is not a table", parts[..i].join("."))))?;
                let slot = table.get_mut(*part).ok_or_else(|| AmocError::Config(format!("unknown config key {key}")))?;
                if i + 1 == parts.len() {
                    *slot = value.clone();
                    break;
                }
                node = slot;
            }
        }
        doc.try_into().map_err(|e: toml::de::Error| AmocError::Config(format!("after overrides: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.finetune.validate()?;
        self.probe.validate().map_err(config_err)?;
        if self.eval.sweep_eps.windows(2).any(|w| w[1] < w[0]) {
            return Err(AmocError::Config("eval.sweep_eps must be ascending".into()));
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.weights.lambda = 0.3;
        cfg.dataset.toy.grating_amp = 1.0 / 3.0;
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[train]\nepochz = 3\n").unwrap_err();
        assert!(matches!(err, AmocError::Config(_)));
        let top = ExperimentConfig::from_toml("lambda = 0.5\n").unwrap_err();
        assert!(matches!(top, AmocError::Config(_)));
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = ExperimentConfig::default();
        let got = cfg
            .apply_overrides(&["train.epochs=1".into(), "train.variant=CCC".into(), "train.weights.temperature=0.5".into()])
            .unwrap();
        assert_eq!(got.train.epochs, 1);
        assert_eq!(got.train.variant.to_string(), "CCC");
        assert_eq!(got.train.weights.temperature, 0.5);
        assert!(cfg.apply_overrides(&["train.epocs=1".into()]).is_err());
        assert!(cfg.apply_overrides(&["train.epochs=many".into()]).is_err());
        assert!(cfg.apply_overrides(&["train.epochs.x=1".into()]).is_err());
        assert!(cfg.apply_overrides(&["noequals".into()]).is_err());
    }

    #[test]
    fn integer_literal_sets_float_field() {
        let got = ExperimentConfig::default().apply_overrides(&["train.base_lr=1".into()]).unwrap();
        assert_eq!(got.train.base_lr, 1.0);
    }

    #[test]
    fn toy_dataset_sizes() {
        let mut cfg = DatasetConfig { toy_train_size: 20, toy_test_size: 10, max_test: 4, ..Default::default() };
        assert_eq!(cfg.train().unwrap().len(), 20);
        assert_eq!(cfg.test().unwrap().len(), 4);
        cfg.kind = DatasetKind::Cifar10;
        assert!(matches!(cfg.train(), Err(AmocError::Config(_))));
    }
}
