//! Pre-train an AMOC encoder on the synthetic corpus and save a checkpoint.
//!
//! `cargo run --release --example pretrain_toy -- [epochs] [out-dir]`

use amoc::dataio::synth_toy_dataset;
use amoc::model::ArchConfig;
use amoc::train::{load_checkpoint, pretrain_with, PretrainOptions, TrainConfig};

fn main() -> amoc::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(4, |s| s.parse().expect("epochs"));
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "runs/example-pretrain".into()));
    std::fs::create_dir_all(&out)?;

    let data = synth_toy_dataset(1000, 512, 2, 16)?;
    let cfg = TrainConfig { arch: ArchConfig::toy(), epochs, warmup_epochs: 1, bank_size: 512, ..Default::default() };
    let mut log = |s: &amoc::train::PretrainState| {
        let m = s.metrics.last().unwrap();
        println!("epoch {:>2}  lr {:.4}  L_CCC {:.3}  L_{} {:.3}  bank age {:.0}", m.epoch, m.lr, m.l_ccc, cfg.variant, m.l_variant, m.bank_age_adv);
        Ok(())
    };
    let ck = pretrain_with(
        &cfg,
        &data,
        PretrainOptions {
            metrics_path: Some(out.join("metrics.jsonl")),
            checkpoint_path: Some(out.join("checkpoint.bin")),
            on_epoch: Some(&mut log),
            ..Default::default()
        },
    )?;
    let back = load_checkpoint(out.join("checkpoint.bin"))?;
    assert_eq!(back.pair, ck.pair);
    println!("checkpoint and metrics written to {}", out.display());
    Ok(())
}
