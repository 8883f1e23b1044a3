use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{epoch_batches, lr_schedule, Sgd};
use crate::attacks::AttackSpec;
use crate::dataio::{finetune_augment, Images, LabeledImageSet};
use crate::error::{arg_err, AmocError, Result};
use crate::losses::{pgd_at_step, standard_step, trades_step};
use crate::model::{ArchConfig, BnMode, Classifier, DualBnEncoder};
use crate::seed::substream;

/// Training objective of the supervised driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedObjective {
    Trades,
    PgdAt,
    /// Plain cross-entropy, no attack.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub objective: SupervisedObjective,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub trades_beta: f64,
    pub attack: AttackSpec,
    pub augment: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            objective: SupervisedObjective::Trades,
            epochs: 30,
            batch_size: 64,
            base_lr: 0.1,
            warmup_epochs: 0,
            weight_decay: 5e-4,
            sgd_momentum: 0.9,
            trades_beta: 6.0,
            attack: AttackSpec::pgd10(),
            augment: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AmocError::Config("batch_size must be positive".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(AmocError::Config(format!("warmup_epochs {} must be < epochs {}", self.warmup_epochs, self.epochs)));
        }
        if !(self.base_lr > 0.0) || !(self.trades_beta > 0.0) {
            return Err(AmocError::Config("base_lr and trades_beta must be positive".into()));
        }
        self.attack.validate().map_err(|e| AmocError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub natural: f64,
    pub robust: f64,
}

/// A freshly initialized encoder, the starting point of the scratch baseline.
pub fn scratch_encoder(arch: &ArchConfig, seed: u64) -> Result<DualBnEncoder> {
    DualBnEncoder::new(arch, &mut substream(seed, "scratch"))
}

/// Full-network supervised training (TRADES by default) of `encoder`'s backbone plus a new linear
/// head, through BN_adv.
pub fn finetune(encoder: &DualBnEncoder, data: &LabeledImageSet, cfg: &FinetuneConfig) -> Result<(Classifier, Vec<FinetuneEpoch>)> {
    finetune_with(encoder, data, cfg, &mut |_, _| Ok(()))
}

pub fn finetune_with(
    encoder: &DualBnEncoder,
    data: &LabeledImageSet,
    cfg: &FinetuneConfig,
    on_epoch: &mut dyn FnMut(&FinetuneEpoch, &Classifier) -> Result<()>,
) -> Result<(Classifier, Vec<FinetuneEpoch>)> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return arg_err("empty training set");
    }
    let mut model = Classifier::from_encoder(encoder, data.num_classes, BnMode::Adv, &mut substream(cfg.seed, "head"));
    let mut opt = Sgd::new(cfg.sgd_momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.warmup_epochs, cfg.base_lr)?;
        let mut order = substream(cfg.seed, &format!("ft-order/{epoch}"));
        let mut aug = substream(cfg.seed, &format!("ft-augment/{epoch}"));
        let mut atk = substream(cfg.seed, &format!("ft-attack/{epoch}"));
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut order);
        let (mut tot, mut nat, mut rob) = (0.0, 0.0, 0.0);
        for (bi, idx) in batches.iter().enumerate() {
            let (mut x, y) = data.gather(idx);
            if cfg.augment {
                x = augment_batch(&x, &mut aug)?;
            }
            let (loss, grads) = match cfg.objective {
                SupervisedObjective::Trades => trades_step(&mut model, &x, &y, cfg.trades_beta, &cfg.attack, &mut atk)?,
                SupervisedObjective::PgdAt => pgd_at_step(&mut model, &x, &y, &cfg.attack, &mut atk)?,
                SupervisedObjective::Standard => standard_step(&mut model, &x, &y)?,
            };
            if !loss.total.is_finite() {
                return Err(AmocError::Numeric(format!("non-finite training loss at epoch {epoch}, batch {bi} (seed {})", cfg.seed)));
            }
            let [b, h] = model.networks_mut();
            opt.step(&mut [b, h], &[&grads.backbone, &grads.head], lr);
            tot += loss.total;
            nat += loss.natural;
            rob += loss.robust;
        }
        let n = batches.len() as f64;
        let e = FinetuneEpoch {
            epoch,
            lr,
            loss: tot / n,
            natural: nat / n,
            robust: rob / n,
        };
        on_epoch(&e, &model)?;
        log.push(e);
    }
    Ok((model, log))
}

fn augment_batch(x: &Images, rng: &mut crate::seed::SeededRng) -> Result<Images> {
    let mut out = Array4::zeros(x.raw_dim());
    for (i, img) in x.axis_iter(Axis(0)).enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&finetune_augment(img, rng)?);
    }
    Ok(out)
}
