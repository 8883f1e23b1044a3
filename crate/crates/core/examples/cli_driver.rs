//! Drive the command-line front end in process: pre-train from the toy
//! config, evaluate, and plot.

use amoc::cli::run_command;

fn main() {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml");
    let out = "runs/example-cli";
    let steps: [&[&str]; 4] = [
        &["pretrain", "--config", config, "--out", out, "--set", "train.epochs=2"],
        &["linear-eval", "--config", config, "--out", out, "--kind", "adev"],
        &["eps-sweep", "--config", config, "--out", out, "--set", "dataset.max_test=64"],
        &["plot", "--kind", "loss-curves", "--out", "runs/example-cli/loss.svg", "runs/example-cli/metrics.jsonl"],
    ];
    for args in steps {
        let code = run_command(std::iter::once("amoc").chain(args.iter().copied()));
        println!("amoc {} -> exit {code}", args[0]);
        if code != 0 {
            std::process::exit(code);
        }
    }
}
