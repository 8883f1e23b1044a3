//! Train a small classifier with plain cross-entropy, then run the default
//! attack table against it and print the report.

use amoc::attacks::table_defaults;
use amoc::dataio::synth_toy_dataset;
use amoc::eval::{fingerprint, robust_accuracy};
use amoc::model::ArchConfig;
use amoc::train::{finetune, scratch_encoder, FinetuneConfig, SupervisedObjective};

fn main() -> amoc::Result<()> {
    let train = synth_toy_dataset(1000, 512, 2, 16)?;
    let test = synth_toy_dataset(2000, 64, 2, 16)?;
    let cfg = FinetuneConfig { objective: SupervisedObjective::Standard, epochs: 3, ..Default::default() };
    let (clf, _) = finetune(&scratch_encoder(&ArchConfig::toy(), 0)?, &train, &cfg)?;
    let report = robust_accuracy(&clf, fingerprint(&clf.networks()), &test, &table_defaults(), 0)?;
    print!("{}", report.to_table());
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
