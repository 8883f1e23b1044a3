//! Export BN_adv embeddings, project them with PCA and draw a scatter plot.

use amoc::cli::{emit_plots, PlotKind};
use amoc::dataio::synth_toy_dataset;
use amoc::eval::{export_embeddings, pca, write_embeddings, write_labels};
use amoc::model::{ArchConfig, BnMode, DualBnEncoder};
use amoc::seed::substream;
use amoc::train::{pretrain, TrainConfig};

fn main() -> amoc::Result<()> {
    let out = std::path::PathBuf::from("runs/example-embed");
    std::fs::create_dir_all(&out)?;
    let train = synth_toy_dataset(1000, 512, 2, 16)?;
    let test = synth_toy_dataset(2000, 200, 2, 16)?;
    let arch = ArchConfig::toy();
    let random = DualBnEncoder::new(&arch, &mut substream(0, "example"))?;
    let trained = pretrain(&TrainConfig { arch, epochs: 4, warmup_epochs: 1, bank_size: 512, ..Default::default() }, &train)?.pair.query;
    for (name, enc) in [("random", &random), ("trained", &trained)] {
        let emb = export_embeddings(enc, &test, BnMode::Adv)?;
        let p = pca(&emb, 2)?;
        println!("{name:<8} top-2 explained variance {:.3}", p.explained_ratio.iter().sum::<f64>());
        let path = out.join(format!("{name}.bin"));
        write_embeddings(&path, &emb)?;
        write_labels(out.join("labels.txt"), &test.labels)?;
        emit_plots(&[path, out.join("labels.txt")], PlotKind::EmbeddingScatter, &out.join(format!("{name}.svg")))?;
    }
    println!("plots in {}", out.display());
    Ok(())
}
