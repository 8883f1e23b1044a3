//! Pre-train every named variant briefly and compare AdEv robustness.
//!
//! `cargo run --release --example variant_matrix -- [epochs]`

use amoc::dataio::synth_toy_dataset;
use amoc::eval::{linear_eval, EvalProtocol, ProbeKind};
use amoc::losses::VariantTag;
use amoc::model::ArchConfig;
use amoc::train::{pretrain, TrainConfig};

fn main() -> amoc::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(3, |s| s.parse().expect("epochs"));
    let train = synth_toy_dataset(1000, 512, 2, 16)?;
    let test = synth_toy_dataset(2000, 128, 2, 16)?;
    println!("variant  final loss  StdEv PGD20  AdEv PGD20");
    for variant in VariantTag::named() {
        let cfg = TrainConfig { arch: ArchConfig::toy(), variant, epochs, warmup_epochs: 1, bank_size: 512, ..Default::default() };
        let ck = pretrain(&cfg, &train)?;
        let mut row = Vec::new();
        for kind in [ProbeKind::StdEv, ProbeKind::AdEv] {
            let (_, r) = linear_eval(&ck.pair.query, &train, &test, &EvalProtocol { kind, epochs: 3, ..Default::default() })?;
            row.push(r.attacks[0].accuracy);
        }
        println!("{variant:<7}  {:>10.3}  {:>11.1}  {:>10.1}", ck.metrics.last().unwrap().loss, row[0], row[1]);
    }
    Ok(())
}
