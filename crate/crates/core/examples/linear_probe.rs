//! Standard (StdEv) and adversarial (AdEv) linear evaluation of a frozen
//! encoder, before and after a short pre-training run.

use amoc::dataio::synth_toy_dataset;
use amoc::eval::{linear_eval, EvalProtocol, ProbeKind};
use amoc::model::{ArchConfig, DualBnEncoder};
use amoc::seed::substream;
use amoc::train::{pretrain, TrainConfig};

fn probe(name: &str, enc: &DualBnEncoder, train: &amoc::dataio::LabeledImageSet, test: &amoc::dataio::LabeledImageSet) -> amoc::Result<()> {
    for kind in [ProbeKind::StdEv, ProbeKind::AdEv] {
        let protocol = EvalProtocol { kind, epochs: 4, ..Default::default() };
        let (_, r) = linear_eval(enc, train, test, &protocol)?;
        println!("{name:<10} {kind:?}: clean {:5.1}%  PGD20 {:5.1}%", r.clean_accuracy, r.attacks[0].accuracy);
    }
    Ok(())
}

fn main() -> amoc::Result<()> {
    let train = synth_toy_dataset(1000, 512, 2, 16)?;
    let test = synth_toy_dataset(2000, 200, 2, 16)?;
    let arch = ArchConfig::toy();
    probe("random", &DualBnEncoder::new(&arch, &mut substream(0, "example"))?, &train, &test)?;
    let cfg = TrainConfig { arch, epochs: 4, warmup_epochs: 1, bank_size: 512, ..Default::default() };
    let ck = pretrain(&cfg, &train)?;
    probe("pretrained", &ck.pair.query, &train, &test)
}
