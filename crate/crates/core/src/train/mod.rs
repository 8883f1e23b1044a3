//! Pre-training, fine-tuning and baseline drivers with their optimizer,
//! schedule and checkpoint format.

mod checkpoint;
mod finetune;
mod optim;
mod pretrain;

pub use checkpoint::{
    load_checkpoint, load_classifier, read_container, save_checkpoint, save_classifier, write_container, Checkpoint, ClassifierFile,
    CHECKPOINT_VERSION,
};
pub use finetune::{finetune, finetune_with, scratch_encoder, FinetuneConfig, FinetuneEpoch, SupervisedObjective};
pub use optim::Sgd;
pub use pretrain::{epoch_batches, pretrain, pretrain_with, EpochMetrics, PretrainOptions, PretrainState};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::dataio::AugmentationPipeline;
use crate::error::{arg_err, AmocError, Result};
use crate::losses::{LossWeights, VariantTag};
use crate::model::ArchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub weights: LossWeights,
    pub bank_size: usize,
    /// Key-encoder momentum `m`.
    pub momentum: f64,
    pub attack: AttackSpec,
    pub variant: VariantTag,
    pub seed: u64,
    pub arch: ArchConfig,
    pub augment: AugmentationPipeline,
}

impl Default for TrainConfig {
    /// Desk-scale settings.
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 30,
            base_lr: 0.1,
            warmup_epochs: 10,
            weight_decay: 5e-4,
            sgd_momentum: 0.9,
            weights: LossWeights::default(),
            bank_size: 2048,
            momentum: 0.99,
            attack: AttackSpec::pretrain(),
            variant: VariantTag::ACA,
            seed: 0,
            arch: ArchConfig::default(),
            augment: AugmentationPipeline::pretrain(),
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: batch 256, 200 epochs, K = 32768, m = 0.999, ResNet-18.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 256,
            epochs: 200,
            bank_size: 32768,
            momentum: 0.999,
            arch: ArchConfig::resnet18(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(AmocError::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return cfg("batch_size and epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return cfg(format!("warmup_epochs {} must be < epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size > self.bank_size {
            return cfg(format!("batch_size {} exceeds bank_size {}", self.batch_size, self.bank_size));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return cfg("need base_lr > 0, weight_decay >= 0, sgd_momentum in [0,1)".into());
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return cfg(format!("momentum {} outside (0,1)", self.momentum));
        }
        self.weights.validate().map_err(|e| AmocError::Config(e.to_string()))?;
        self.attack.validate().map_err(|e| AmocError::Config(e.to_string()))?;
        self.arch.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        lr_schedule(epoch, self.epochs, self.warmup_epochs, self.base_lr)
    }
}

/// Per-epoch linear warmup `base·(e+1)/W` for `e < W`, then
/// `base·½(1 + cos(π·(e−W)/(E−W)))`.
pub fn lr_schedule(epoch: usize, epochs: usize, warmup: usize, base_lr: f64) -> Result<f64> {
    if epoch >= epochs {
        return arg_err(format!("epoch {epoch} outside [0, {epochs})"));
    }
    if warmup >= epochs {
        return arg_err(format!("warmup {warmup} must be < epochs {epochs}"));
    }
    if epoch < warmup {
        return Ok(base_lr * (epoch + 1) as f64 / warmup as f64);
    }
    let progress = (epoch - warmup) as f64 / (epochs - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoint_is_base() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(c.warmup_epochs - 1).unwrap(), c.base_lr);
        assert_eq!(c.lr_at(0).unwrap(), c.base_lr / c.warmup_epochs as f64);
        assert!(c.lr_at(c.epochs).is_err());
    }

    #[test]
    fn cosine_tail_is_monotone_and_bounded() {
        let c = TrainConfig::default();
        let (e, w) = (c.epochs, c.warmup_epochs);
        let lrs: Vec<f64> = (w..e).map(|i| c.lr_at(i).unwrap()).collect();
        assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
        let bound = c.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * (e - 1 - w) as f64 / (e - w) as f64).cos());
        let last = *lrs.last().unwrap();
        assert!(last >= 0.0 && last <= bound + 1e-15);
    }

    #[test]
    fn zero_warmup_is_pure_cosine() {
        let c = TrainConfig { warmup_epochs: 0, ..Default::default() };
        assert_eq!(c.lr_at(0).unwrap(), c.base_lr);
        for e in 0..c.epochs {
            let expect = c.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * e as f64 / c.epochs as f64).cos());
            assert!((c.lr_at(e).unwrap() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::full_scale().validate().is_ok());
        let bad = TrainConfig { warmup_epochs: 30, ..Default::default() };
        assert!(matches!(bad.validate(), Err(AmocError::Config(_))));
        let bad = TrainConfig { batch_size: 4096, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
