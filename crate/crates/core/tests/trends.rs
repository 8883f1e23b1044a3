//! Small paired runs on the synthetic corpus.

use std::sync::OnceLock;

use amoc::attacks::AttackSpec;
use amoc::dataio::{synth_toy_dataset, LabeledImageSet};
use amoc::eval::{epsilon_sweep, export_embeddings, linear_eval, pca, robust_accuracy, EvalProtocol, ProbeKind};
use amoc::model::{ArchConfig, BnMode, DualBnEncoder};
use amoc::seed::substream;
use amoc::train::{finetune, pretrain, scratch_encoder, FinetuneConfig, SupervisedObjective, TrainConfig};

struct Desk {
    train: LabeledImageSet,
    test: LabeledImageSet,
    encoder: DualBnEncoder,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let train = synth_toy_dataset(1000, 2000, 2, 16).unwrap();
        let test = synth_toy_dataset(2000, 200, 2, 16).unwrap();
        let cfg = TrainConfig { arch: ArchConfig::desk(), ..Default::default() };
        let encoder = pretrain(&cfg, &train).unwrap().pair.query;
        Desk { train, test, encoder }
    })
}

#[test]
fn standard_training_is_broken_by_eight_over_255() {
    let train = synth_toy_dataset(1000, 2000, 2, 16).unwrap();
    let test = synth_toy_dataset(2000, 200, 2, 16).unwrap();
    let cfg = FinetuneConfig { objective: SupervisedObjective::Standard, epochs: 15, augment: false, ..Default::default() };
    let (clf, _) = finetune(&scratch_encoder(&ArchConfig::desk(), 0).unwrap(), &train, &cfg).unwrap();
    let eps: Vec<f64> = (0..=8).map(|k| k as f64 / 255.0).collect();
    let curve = epsilon_sweep(&clf, &test, &eps, &AttackSpec::pgd20(), 0).unwrap();
    let clean = curve.points[0].1;
    let last = curve.points.last().unwrap().1;
    assert!(clean >= 90.0, "{:?}", curve.points);
    assert!(last < 0.1 * clean, "{:?}", curve.points);
}

#[test]
fn trained_embeddings_concentrate_variance() {
    let d = desk();
    let top2 = |e: &DualBnEncoder| pca(&export_embeddings(e, &d.test, BnMode::Adv).unwrap(), 2).unwrap().explained_ratio.iter().sum::<f64>();
    let trained = top2(&d.encoder);
    for seed in 0..3 {
        let random = top2(&DualBnEncoder::new(&ArchConfig::desk(), &mut substream(seed, "random-encoder")).unwrap());
        assert!(trained > random, "trained {trained:.3} vs random {random:.3}");
    }
}

#[test]
fn fine_tuning_beats_the_frozen_adversarial_probe() {
    let d = desk();
    let protocol = EvalProtocol { kind: ProbeKind::AdEv, epochs: 5, ..Default::default() };
    let (_, probe) = linear_eval(&d.encoder, &d.train, &d.test, &protocol).unwrap();
    let (clf, _) = finetune(&d.encoder, &d.train, &FinetuneConfig { epochs: 5, ..Default::default() }).unwrap();
    let attacks = vec![amoc::attacks::NamedAttack { name: "PGD20".into(), attack: amoc::attacks::Attack::Pgd { spec: AttackSpec::pgd20() } }];
    let tuned = robust_accuracy(&clf, String::new(), &d.test, &attacks, 0).unwrap();
    assert!(
        tuned.attacks[0].accuracy >= probe.attacks[0].accuracy,
        "fine-tuned {} vs probe {}",
        tuned.attacks[0].accuracy,
        probe.attacks[0].accuracy
    );
}
