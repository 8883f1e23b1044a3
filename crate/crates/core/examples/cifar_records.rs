//! Round-trip a corpus through the CIFAR-10 binary record format, or
//! summarize a real batch file when one is given.
//!
//! `cargo run --example cifar_records -- [data_batch_1.bin]`

use amoc::dataio::{load_cifar10_binary, load_records, synth_toy_dataset, write_records, LabeledImageSet};

fn summarize(name: &str, set: &LabeledImageSet) {
    let mut counts = vec![0usize; set.num_classes];
    set.labels.iter().for_each(|&y| counts[y] += 1);
    let mean = set.images.mean().unwrap_or(0.0);
    println!("{name}: {} images {:?}, mean pixel {mean:.4}, class counts {counts:?}", set.len(), set.images.shape());
}

fn main() -> amoc::Result<()> {
    if let Some(path) = std::env::args().nth(1) {
        summarize(&path, &load_cifar10_binary(&path)?);
        return Ok(());
    }
    let set = synth_toy_dataset(1000, 100, 4, 16)?;
    let dir = tempfile_dir();
    let path = dir.join("toy.bin");
    write_records(&set, &path)?;
    let back = load_records(&path, 4, 16)?;
    let max_err = set.images.iter().zip(back.images.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    summarize("original", &set);
    summarize("reloaded", &back);
    println!("{} bytes on disk, max pixel error {max_err:.5} (8-bit quantization)", std::fs::metadata(&path)?.len());
    assert_eq!(set.labels, back.labels);
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("amoc-cifar-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}
