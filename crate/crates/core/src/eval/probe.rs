use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::robust::{fingerprint, robust_accuracy, RobustnessReport};
use crate::attacks::{ce_objective, pgd, Attack, AttackSpec, NamedAttack};
use crate::dataio::{finetune_augment, LabeledImageSet};
use crate::error::{AmocError, Result};
use crate::losses::cross_entropy;
use crate::model::{BnMode, BnPass, Classifier, DualBnEncoder};
use crate::seed::substream;
use crate::train::{epoch_batches, lr_schedule, Sgd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Head trained on clean features.
    StdEv,
    /// Head trained on adversarial examples crafted through the frozen encoder.
    AdEv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Attack used to craft AdEv training examples.
    pub train_attack: AttackSpec,
    /// Attack reported next to clean accuracy.
    pub eval_attack: AttackSpec,
    /// Fine-tune augmentation of AdEv training images.
    pub augment: bool,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            kind: ProbeKind::StdEv,
            epochs: 25,
            lr: 0.1,
            batch_size: 64,
            weight_decay: 5e-4,
            train_attack: AttackSpec::pgd10(),
            eval_attack: AttackSpec::pgd20(),
            augment: true,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn adev() -> Self {
        Self {
            kind: ProbeKind::AdEv,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(AmocError::Config("probe needs epochs, batch_size and lr > 0".into()));
        }
        self.train_attack.validate().and(self.eval_attack.validate()).map_err(|e| AmocError::Config(e.to_string()))
    }
}

/// Trains a linear head on the frozen query encoder (BN_adv, eval
/// statistics) and reports clean and PGD accuracy on `test`.
pub fn linear_eval(encoder: &DualBnEncoder, train: &LabeledImageSet, test: &LabeledImageSet, protocol: &EvalProtocol) -> Result<(Classifier, RobustnessReport)> {
    protocol.validate()?;
    train.validate()?;
    let mut model = Classifier::from_encoder(encoder, train.num_classes, BnMode::Adv, &mut substream(protocol.seed, "probe-head"));
    let clean_feats = match protocol.kind {
        ProbeKind::StdEv => Some(model.features(&train.images)?),
        ProbeKind::AdEv => None,
    };
    let mut opt = Sgd::new(0.9, protocol.weight_decay);
    for epoch in 0..protocol.epochs {
        let lr = lr_schedule(epoch, protocol.epochs, 0, protocol.lr)?;
        let mut order = substream(protocol.seed, &format!("probe-order/{epoch}"));
        let mut aug = substream(protocol.seed, &format!("probe-augment/{epoch}"));
        let mut atk = substream(protocol.seed, &format!("probe-attack/{epoch}"));
        for idx in epoch_batches(train.len(), protocol.batch_size, &mut order) {
            let (feats, y) = match &clean_feats {
                Some(f) => (f.select(Axis(0), &idx), idx.iter().map(|&i| train.labels[i]).collect::<Vec<_>>()),
                None => {
                    let (mut x, y) = train.gather(&idx);
                    if protocol.augment {
                        for (j, img) in x.clone().axis_iter(Axis(0)).enumerate() {
                            x.index_axis_mut(Axis(0), j).assign(&finetune_augment(img, &mut aug)?);
                        }
                    }
                    let adv = pgd(&mut ce_objective(&model, &y), &x, &protocol.train_attack, &mut atk)?;
                    (model.features(&adv)?, y)
                }
            };
            head_step(&mut model, &feats, &y, &mut opt, lr)?;
        }
    }
    let attacks = vec![NamedAttack {
        name: format!("PGD{}", protocol.eval_attack.steps),
        attack: Attack::Pgd { spec: protocol.eval_attack },
    }];
    let fp = fingerprint(&model.networks());
    let report = robust_accuracy(&model, fp, test, &attacks, protocol.seed)?;
    Ok((model, report))
}

fn head_step(model: &mut Classifier, feats: &Array2<f64>, y: &[usize], opt: &mut Sgd, lr: f64) -> Result<()> {
    let (z, tape, _) = model.head.run(&feats.clone().into_dyn(), model.bn, BnPass::Eval, true);
    let (_, g) = cross_entropy(&z.into_dimensionality().unwrap(), y)?;
    let mut grads = crate::model::Grads::zeros_like(&model.head);
    model.head.backward(&tape.unwrap(), g.into_dyn(), Some(&mut grads), false);
    opt.step(&mut [&mut model.head], &[&grads], lr);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_toy_dataset;
    use crate::model::ArchConfig;
    use ndarray::Array4;
    use rand::Rng;

    fn encoder(seed: u64) -> DualBnEncoder {
        DualBnEncoder::new(&ArchConfig::toy(), &mut substream(seed, "enc")).unwrap()
    }

    /// Two classes of flat images, dark and bright, with pixel noise.
    fn flat_set(n: usize, seed: u64) -> LabeledImageSet {
        let mut rng = substream(seed, "flat");
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let images = Array4::from_shape_fn((n, 3, 16, 16), |(i, ..)| 0.3 + 0.4 * labels[i] as f64 + rng.random_range(-0.05..0.05));
        LabeledImageSet::new(images, labels, 2).unwrap()
    }

    fn quick(kind: ProbeKind) -> EvalProtocol {
        EvalProtocol { kind, epochs: 5, ..Default::default() }
    }

    #[test]
    fn separable_features_give_high_stdev_accuracy() {
        let p = EvalProtocol { epochs: 25, ..quick(ProbeKind::StdEv) };
        let (_, r) = linear_eval(&encoder(1), &flat_set(256, 1), &flat_set(64, 2), &p).unwrap();
        assert!(r.clean_accuracy >= 95.0, "{}", r.clean_accuracy);
        assert_eq!(r.attacks.len(), 1);
        assert_eq!(r.attacks[0].name, "PGD20");
    }

    #[test]
    fn random_encoder_is_not_robust() {
        let train = synth_toy_dataset(3, 200, 4, 16).unwrap();
        let test = synth_toy_dataset(4, 100, 4, 16).unwrap();
        let (_, r) = linear_eval(&encoder(2), &train, &test, &quick(ProbeKind::StdEv)).unwrap();
        assert!(r.attacks[0].accuracy <= 2.0 * 25.0, "{:?}", r);
    }

    #[test]
    fn evaluation_leaves_the_encoder_untouched() {
        let enc = encoder(3);
        let before = enc.clone();
        for kind in [ProbeKind::StdEv, ProbeKind::AdEv] {
            let p = EvalProtocol { epochs: 1, ..quick(kind) };
            let (clf, _) = linear_eval(&enc, &flat_set(32, 3), &flat_set(16, 4), &p).unwrap();
            assert_eq!(clf.backbone, enc.backbone);
        }
        assert_eq!(enc, before);
    }

    #[test]
    fn adev_probe_is_reproducible() {
        let p = EvalProtocol { epochs: 1, ..quick(ProbeKind::AdEv) };
        let a = linear_eval(&encoder(4), &flat_set(32, 5), &flat_set(16, 6), &p).unwrap().1;
        let b = linear_eval(&encoder(4), &flat_set(32, 5), &flat_set(16, 6), &p).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_protocol_is_a_config_error() {
        let p = EvalProtocol { epochs: 0, ..Default::default() };
        assert!(matches!(linear_eval(&encoder(5), &flat_set(8, 1), &flat_set(8, 2), &p), Err(AmocError::Config(_))));
    }
}
