//! Paired t-test over per-seed robust accuracies of two training variants.

use amoc::dataio::synth_toy_dataset;
use amoc::eval::{linear_eval, paired_ttest, EvalProtocol, ProbeKind};
use amoc::losses::VariantTag;
use amoc::model::ArchConfig;
use amoc::train::{pretrain, TrainConfig};

fn main() -> amoc::Result<()> {
    let train = synth_toy_dataset(1000, 256, 2, 16)?;
    let test = synth_toy_dataset(2000, 100, 2, 16)?;
    let mut scores = vec![Vec::new(), Vec::new()];
    for seed in 0..3 {
        for (slot, variant) in [VariantTag::ACA, VariantTag::CCC].into_iter().enumerate() {
            let cfg = TrainConfig { arch: ArchConfig::toy(), variant, seed, epochs: 2, warmup_epochs: 1, bank_size: 256, ..Default::default() };
            let ck = pretrain(&cfg, &train)?;
            let protocol = EvalProtocol { kind: ProbeKind::AdEv, epochs: 2, seed, ..Default::default() };
            let acc = linear_eval(&ck.pair.query, &train, &test, &protocol)?.1.attacks[0].accuracy;
            println!("seed {seed} {variant}: AdEv PGD20 {acc:.1}%");
            scores[slot].push(acc);
        }
    }
    let t = paired_ttest(&scores[0], &scores[1])?;
    println!("ACA vs CCC: t = {:.3}, p = {:.4} (n = {})", t.t, t.p, t.n);
    Ok(())
}
