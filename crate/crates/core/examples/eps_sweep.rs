//! Accuracy against ε for a standard-trained and a TRADES-trained model,
//! written as curve JSON and an SVG chart.

use amoc::attacks::AttackSpec;
use amoc::cli::{emit_plots, PlotKind};
use amoc::dataio::synth_toy_dataset;
use amoc::eval::epsilon_sweep;
use amoc::model::ArchConfig;
use amoc::train::{finetune, scratch_encoder, FinetuneConfig, SupervisedObjective};

fn main() -> amoc::Result<()> {
    let out = std::path::PathBuf::from("runs/example-eps");
    std::fs::create_dir_all(&out)?;
    let train = synth_toy_dataset(1000, 512, 2, 16)?;
    let test = synth_toy_dataset(2000, 128, 2, 16)?;
    let eps: Vec<f64> = (0..=8).map(|k| k as f64 / 255.0).collect();
    let mut files = Vec::new();
    for objective in [SupervisedObjective::Standard, SupervisedObjective::Trades] {
        let cfg = FinetuneConfig { objective, epochs: 3, ..Default::default() };
        let (clf, _) = finetune(&scratch_encoder(&ArchConfig::toy(), 0)?, &train, &cfg)?;
        let mut curve = epsilon_sweep(&clf, &test, &eps, &AttackSpec::pgd20(), 0)?;
        curve.label = format!("{objective:?}");
        for (e, a) in &curve.points {
            println!("{:<12} eps {:>3.0}/255  {a:5.1}%", curve.label, e * 255.0);
        }
        let path = out.join(format!("{objective:?}.json").to_lowercase());
        std::fs::write(&path, serde_json::to_string_pretty(&curve).expect("curve serializes"))?;
        files.push(path);
    }
    let svg = emit_plots(&files, PlotKind::EpsCurve, &out.join("eps.svg"))?;
    println!("wrote {}", svg[0].display());
    Ok(())
}
