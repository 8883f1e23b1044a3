//! Command-line experiment runner.
//!
//! Every subcommand reads an [`ExperimentConfig`] (`--config`), applies
//! `--set key=value` overrides and writes its artifacts plus a
//! `resolved-config.toml` under `--out`.

mod config;
mod plot;

pub use config::{AttackEvalConfig, DatasetConfig, DatasetKind, ExperimentConfig};
pub use plot::{emit_plots, PlotKind};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::attacks::{Attack, NamedAttack};
use crate::dataio::LabeledImageSet;
use crate::error::{AmocError, Result};
use crate::eval::{
    epsilon_sweep, export_embeddings, fingerprint, linear_eval, paired_ttest, robust_accuracy, write_embeddings, write_labels,
    ProbeKind, RobustnessReport,
};
use crate::model::{BnMode, Classifier};
use crate::train::{
    finetune_with, load_checkpoint, load_classifier, pretrain_with, save_checkpoint, save_classifier, scratch_encoder, Checkpoint, ClassifierFile,
    PretrainOptions,
};

pub const SEED_ENV: &str = "AMOC_SEED";
pub const RESOLVED_CONFIG: &str = "resolved-config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Parser, Debug)]
#[command(name = "amoc", about = "Adversarial momentum-contrastive pre-training and robustness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `train.epochs=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    /// Pre-training checkpoint or classifier file; defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive pre-training; writes checkpoint.bin and metrics.jsonl.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoint.bin`.
        #[arg(long)]
        resume: bool,
    },
    /// Linear probe on the frozen encoder (StdEv or AdEv).
    LinearEval {
        #[command(flatten)]
        model: WithModel,
        #[arg(long, value_parser = ["stdev", "adev"])]
        kind: Option<String>,
    },
    /// Supervised fine-tuning (TRADES by default); scratch init without --checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// The full attack suite against a classifier (or a freshly probed encoder).
    AttackEval {
        #[command(flatten)]
        model: WithModel,
    },
    /// Accuracy as a function of the perturbation budget.
    EpsSweep {
        #[command(flatten)]
        model: WithModel,
    },
    /// Paired t-test between two report files.
    Ttest { a: PathBuf, b: PathBuf },
    /// Query-encoder embeddings of the test set.
    ExportEmbeddings {
        #[command(flatten)]
        model: WithModel,
        #[arg(long, value_parser = ["clean", "adv"], default_value = "adv")]
        bn: String,
    },
    /// Deterministic SVG plots.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Output SVG path.
        #[arg(long, default_value = "plot.svg")]
        out: PathBuf,
        inputs: Vec<PathBuf>,
    },
}

/// Exit code for an error: 2 for configuration and argument problems, 1 otherwise.
pub fn exit_code(err: &AmocError) -> i32 {
    match err {
        AmocError::Config(_) | AmocError::Argument(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first) and runs the selected subcommand.
/// Returns 0 on success, 2 on usage or config errors, 1 on runtime failure.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Builds the effective config: file (or defaults), then `AMOC_SEED`, then
/// `--set` overrides, then `--out`.
fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seed = raw.trim().parse().map_err(|_| AmocError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        cfg.set_seed(seed);
    }
    let mut cfg = cfg.apply_overrides(&common.set)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn checkpoint_path(cfg: &ExperimentConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE))
}

/// A classifier to attack: loaded directly, or probed on top of a
/// pre-trained encoder with the configured protocol.
fn classifier_for(cfg: &ExperimentConfig, path: &Path, train: &LabeledImageSet) -> Result<(Classifier, String)> {
    match load_classifier(path) {
        Ok(f) => return Ok((f.model, label_of(&f.meta))),
        Err(AmocError::Incompatible(_)) => {}
        Err(e) => return Err(e),
    }
    let ck = load_checkpoint(path)?;
    let (model, _) = linear_eval(&ck.pair.query, train, &cfg.dataset.test()?.take(1), &cfg.probe)?;
    Ok((model, format!("{} {:?}", ck.config.variant, cfg.probe.kind)))
}

fn label_of(meta: &serde_json::Value) -> String {
    meta.get("label").and_then(|v| v.as_str()).unwrap_or_default().to_string()
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { common, resume } => {
            let cfg = resolve(&common)?;
            let data = cfg.dataset.train()?;
            let ck_path = cfg.out.join(CHECKPOINT_FILE);
            let resume = if resume { Some(load_checkpoint(&ck_path)?) } else { None };
            let ck = pretrain_with(
                &cfg.train,
                &data,
                PretrainOptions {
                    metrics_path: Some(cfg.out.join("metrics.jsonl")),
                    checkpoint_path: Some(ck_path.clone()),
                    resume,
                    ..Default::default()
                },
            )?;
            if let Some(m) = ck.metrics.last() {
                println!("epoch {} loss {:.4} (ccc {:.4}, {} {:.4})", m.epoch, m.loss, m.l_ccc, cfg.train.variant, m.l_variant);
            }
            save_checkpoint(&ck, &ck_path)?;
            println!("wrote {}", ck_path.display());
            Ok(())
        }
        Command::LinearEval { model, kind } => {
            let mut cfg = resolve(&model.common)?;
            if let Some(k) = kind {
                cfg.probe.kind = if k == "adev" { ProbeKind::AdEv } else { ProbeKind::StdEv };
            }
            let ck = load_checkpoint(checkpoint_path(&cfg, &model.checkpoint))?;
            let (train, test) = (cfg.dataset.train()?, cfg.dataset.test()?);
            let (clf, mut report) = linear_eval(&ck.pair.query, &train, &test, &cfg.probe)?;
            let tag = format!("{:?}", cfg.probe.kind).to_lowercase();
            report.label = format!("{} {:?}", ck.config.variant, cfg.probe.kind);
            write_json(&cfg.out.join(format!("probe-{tag}.json")), &report)?;
            fs::write(cfg.out.join(format!("probe-{tag}.txt")), report.to_table())?;
            let meta = json!({ "label": report.label, "source": "linear-eval" });
            save_classifier(&ClassifierFile { arch: ck.config.arch.clone(), model: clf, meta }, cfg.out.join(format!("probe-{tag}-classifier.bin")))?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Finetune { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let (train, test) = (cfg.dataset.train()?, cfg.dataset.test()?);
            let (encoder, arch, init) = match &checkpoint {
                Some(p) => {
                    let ck: Checkpoint = load_checkpoint(p)?;
                    (ck.pair.query, ck.config.arch, "pretrained")
                }
                None => (scratch_encoder(&cfg.train.arch, cfg.finetune.seed)?, cfg.train.arch.clone(), "scratch"),
            };
            let log_path = cfg.out.join("finetune.jsonl");
            let mut lines = String::new();
            let (clf, _) = finetune_with(&encoder, &train, &cfg.finetune, &mut |e, _| {
                lines.push_str(&serde_json::to_string(e)?);
                lines.push('\n');
                fs::write(&log_path, &lines)?;
                Ok(())
            })?;
            let attacks = vec![NamedAttack {
                name: format!("PGD{}", cfg.probe.eval_attack.steps),
                attack: Attack::Pgd { spec: cfg.probe.eval_attack },
            }];
            let mut report = robust_accuracy(&clf, fingerprint(&clf.networks()), &test, &attacks, cfg.finetune.seed)?;
            report.label = format!("{init} {:?}", cfg.finetune.objective);
            write_json(&cfg.out.join("finetune-report.json"), &report)?;
            let meta = json!({ "label": report.label, "source": "finetune" });
            save_classifier(&ClassifierFile { arch, model: clf, meta }, cfg.out.join("classifier.bin"))?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::AttackEval { model } => {
            let cfg = resolve(&model.common)?;
            let train = cfg.dataset.train()?;
            let (clf, label) = classifier_for(&cfg, &checkpoint_path(&cfg, &model.checkpoint), &train)?;
            let mut report = robust_accuracy(&clf, fingerprint(&clf.networks()), &cfg.dataset.test()?, &cfg.eval.attacks, cfg.probe.seed)?;
            report.label = label;
            write_json(&cfg.out.join("attack-report.json"), &report)?;
            fs::write(cfg.out.join("attack-report.txt"), report.to_table())?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::EpsSweep { model } => {
            let cfg = resolve(&model.common)?;
            let train = cfg.dataset.train()?;
            let (clf, label) = classifier_for(&cfg, &checkpoint_path(&cfg, &model.checkpoint), &train)?;
            let mut curve = epsilon_sweep(&clf, &cfg.dataset.test()?, &cfg.eval.sweep_eps, &cfg.eval.sweep_template, cfg.probe.seed)?;
            curve.label = label;
            write_json(&cfg.out.join("eps-curve.json"), &curve)?;
            for (e, a) in &curve.points {
                println!("eps {e:.5}  acc {a:.2}");
            }
            Ok(())
        }
        Command::Ttest { a, b } => {
            let t = paired_ttest(&read_scores(&a)?, &read_scores(&b)?)?;
            println!("{}", serde_json::to_string(&t)?);
            Ok(())
        }
        Command::ExportEmbeddings { model, bn } => {
            let cfg = resolve(&model.common)?;
            let ck = load_checkpoint(checkpoint_path(&cfg, &model.checkpoint))?;
            let test = cfg.dataset.test()?;
            let bn = if bn == "clean" { BnMode::Clean } else { BnMode::Adv };
            let emb = export_embeddings(&ck.pair.query, &test, bn)?;
            write_embeddings(cfg.out.join("embeddings.bin"), &emb)?;
            write_labels(cfg.out.join("labels.txt"), &test.labels)?;
            println!("wrote {} x {} embeddings", emb.nrows(), emb.ncols());
            Ok(())
        }
        Command::Plot { kind, out, inputs } => {
            for p in emit_plots(&inputs, kind, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

/// Scores from a report (clean accuracy then every attack) or a bare JSON
/// array of numbers.
fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    if let Ok(r) = serde_json::from_str::<RobustnessReport>(&text) {
        return Ok(r.scores());
    }
    serde_json::from_str::<Vec<f64>>(&text).map_err(|e| AmocError::Format(format!("{}: neither a report nor a number list ({e})", path.display())))
}
