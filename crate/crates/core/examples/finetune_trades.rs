//! TRADES fine-tuning from a pre-trained encoder versus from scratch, with
//! robust test accuracy tracked after every epoch.

use amoc::attacks::{Attack, AttackSpec, NamedAttack};
use amoc::dataio::{synth_toy_dataset, LabeledImageSet};
use amoc::eval::robust_accuracy;
use amoc::model::{ArchConfig, DualBnEncoder};
use amoc::train::{finetune_with, pretrain, scratch_encoder, FinetuneConfig, TrainConfig};

fn curve(enc: &DualBnEncoder, train: &LabeledImageSet, test: &LabeledImageSet) -> amoc::Result<Vec<f64>> {
    let pgd20 = [NamedAttack { name: "PGD20".into(), attack: Attack::Pgd { spec: AttackSpec::pgd20() } }];
    let mut acc = Vec::new();
    finetune_with(enc, train, &FinetuneConfig { epochs: 4, ..Default::default() }, &mut |_, clf| {
        acc.push(robust_accuracy(clf, String::new(), test, &pgd20, 0)?.attacks[0].accuracy);
        Ok(())
    })?;
    Ok(acc)
}

fn main() -> amoc::Result<()> {
    let train = synth_toy_dataset(1000, 512, 2, 16)?;
    let test = synth_toy_dataset(2000, 128, 2, 16)?;
    let arch = ArchConfig::toy();
    let pre = pretrain(&TrainConfig { arch: arch.clone(), epochs: 4, warmup_epochs: 1, bank_size: 512, ..Default::default() }, &train)?;
    let a = curve(&pre.pair.query, &train, &test)?;
    let b = curve(&scratch_encoder(&arch, 0)?, &train, &test)?;
    println!("epoch  pretrained  scratch   (PGD20 %)");
    for (e, (x, y)) in a.iter().zip(&b).enumerate() {
        println!("{:>5}  {x:>10.1}  {y:>7.1}", e + 1);
    }
    Ok(())
}
