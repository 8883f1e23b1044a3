use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{EpochMetrics, Sgd, TrainConfig};
use crate::bank::{Banks, MemoryBank};
use crate::error::{AmocError, Result};
use crate::model::{init_encoder_pair, ArchConfig, BnMode, Classifier, DualBnEncoder, EncoderPair, Network, Tensor};
use crate::seed::substream;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "amoc";

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AmocError::Format(msg.into()))
}

/// Writes `header` (a JSON object) extended with the array manifest, as a
/// u64-LE length prefix, the UTF-8 JSON and the raw f64-LE arrays.
pub fn write_container(path: impl AsRef<Path>, mut header: Value, arrays: &[(String, &Tensor)]) -> Result<()> {
    let manifest: Vec<Value> = arrays.iter().map(|(n, t)| json!({"name": n, "shape": t.shape()})).collect();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| AmocError::Internal("container header must be an object".into()))?;
    obj.insert("format".into(), json!(FORMAT));
    obj.insert("dtype".into(), json!("f64"));
    obj.insert("arrays".into(), Value::Array(manifest));
    let head = serde_json::to_vec(&header)?;
    let total: usize = arrays.iter().map(|(_, t)| t.len()).sum();
    let mut buf = Vec::with_capacity(8 + head.len() + 8 * total);
    buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
    buf.extend_from_slice(&head);
    for (_, t) in arrays {
        for v in t.as_standard_layout().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<(Value, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return format_err("file too short for a header");
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if hlen > bytes.len() - 8 {
        return format_err(format!("header length {hlen} exceeds file size {}", bytes.len()));
    }
    let header: Value = serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| AmocError::Format(format!("bad header: {e}")))?;
    if header.get("format").and_then(Value::as_str) != Some(FORMAT) {
        return format_err("not an amoc container");
    }
    if header.get("dtype").and_then(Value::as_str) != Some("f64") {
        return format_err("unsupported dtype");
    }
    let manifest = header
        .get("arrays")
        .and_then(Value::as_array)
        .ok_or_else(|| AmocError::Format("missing array manifest".into()))?;
    let mut off = 8 + hlen;
    let mut arrays = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let name = entry.get("name").and_then(Value::as_str).ok_or_else(|| AmocError::Format("array without name".into()))?;
        let shape: Vec<usize> = serde_json::from_value(entry.get("shape").cloned().unwrap_or(Value::Null))
            .map_err(|e| AmocError::Format(format!("bad shape for {name}: {e}")))?;
        let n: usize = shape.iter().product();
        let end = off + 8 * n;
        if end > bytes.len() {
            return format_err(format!("array {name} truncated"));
        }
        let data: Vec<f64> = bytes[off..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push((name.to_string(), Tensor::from_shape_vec(IxDyn(&shape), data).unwrap()));
        off = end;
    }
    if off != bytes.len() {
        return format_err(format!("{} trailing bytes", bytes.len() - off));
    }
    Ok((header, arrays))
}

fn check_version(header: &Value, kind: &str) -> Result<()> {
    let v = header.get("version").and_then(Value::as_u64);
    if v != Some(CHECKPOINT_VERSION as u64) {
        return Err(AmocError::Incompatible(format!("version {v:?}, expected {CHECKPOINT_VERSION}")));
    }
    let k = header.get("kind").and_then(Value::as_str);
    if k != Some(kind) {
        return Err(AmocError::Incompatible(format!("kind {k:?}, expected {kind}")));
    }
    Ok(())
}

fn meta<T: for<'de> Deserialize<'de>>(header: &Value, key: &str) -> Result<T> {
    let v = header.get(key).cloned().ok_or_else(|| AmocError::Format(format!("missing `{key}`")))?;
    serde_json::from_value(v).map_err(|e| AmocError::Format(format!("bad `{key}`: {e}")))
}

fn push_net<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, net: &'a Network) {
    for (i, p) in net.params.iter().enumerate() {
        out.push((format!("{prefix}.param.{i}.{}", p.name), &p.value));
    }
    for (i, b) in net.buffers.iter().enumerate() {
        out.push((format!("{prefix}.buffer.{i}.{}", b.name), &b.value));
    }
}

struct Arrays(HashMap<String, Tensor>);

impl Arrays {
    fn new(list: Vec<(String, Tensor)>) -> Self {
        Arrays(list.into_iter().collect())
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.0.remove(name).ok_or_else(|| AmocError::Incompatible(format!("missing array {name}")))?;
        if t.shape() != shape {
            return Err(AmocError::Incompatible(format!("array {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }

    fn fill_net(&mut self, prefix: &str, net: &mut Network) -> Result<()> {
        for (i, p) in net.params.iter_mut().enumerate() {
            p.value = self.take(&format!("{prefix}.param.{i}.{}", p.name), &p.value.shape().to_vec())?;
        }
        for (i, b) in net.buffers.iter_mut().enumerate() {
            b.value = self.take(&format!("{prefix}.buffer.{i}.{}", b.name), &b.value.shape().to_vec())?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().min() {
            Some(extra) => Err(AmocError::Incompatible(format!("unexpected array {extra}"))),
            None => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    write_ptr: usize,
    enqueues: u64,
    stamps: Vec<u64>,
}

impl BankMeta {
    fn of(b: &MemoryBank) -> Self {
        BankMeta {
            write_ptr: b.write_ptr(),
            enqueues: b.enqueues(),
            stamps: b.stamps().to_vec(),
        }
    }
}

/// Full pre-training state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub pair: EncoderPair,
    pub banks: Banks,
    pub optimizer: Sgd,
    pub metrics: Vec<EpochMetrics>,
}

impl Checkpoint {
    /// Errors unless the stored encoder was built from `arch`.
    pub fn check_arch(&self, arch: &ArchConfig) -> Result<()> {
        if &self.config.arch != arch {
            return Err(AmocError::Incompatible(format!("checkpoint architecture {:?} differs from {:?}", self.config.arch, arch)));
        }
        Ok(())
    }

    /// Copies the stored parameters into `pair`, leaving it untouched on error.
    pub fn restore_into(&self, pair: &mut EncoderPair) -> Result<()> {
        let same = |a: &DualBnEncoder, b: &DualBnEncoder| a.backbone.same_architecture(&b.backbone) && a.head.same_architecture(&b.head);
        if !same(&self.pair.query, &pair.query) || !same(&self.pair.key, &pair.key) {
            return Err(AmocError::Incompatible("encoder architecture mismatch".into()));
        }
        *pair = self.pair.clone();
        Ok(())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let header = json!({
        "kind": "pretrain",
        "version": CHECKPOINT_VERSION,
        "config": ck.config,
        "epoch": ck.epoch,
        "rng": {"root_seed": ck.config.seed, "next_epoch": ck.epoch},
        "banks": {"clean": BankMeta::of(&ck.banks.clean), "adv": BankMeta::of(&ck.banks.adv)},
        "optimizer": {"momentum": ck.optimizer.momentum, "weight_decay": ck.optimizer.weight_decay, "initialized": !ck.optimizer.velocity().is_empty()},
        "metrics": ck.metrics,
    });
    let clean = ck.banks.clean.negatives().as_ref().clone().into_dyn();
    let adv = ck.banks.adv.negatives().as_ref().clone().into_dyn();
    let mut arrays = Vec::new();
    push_net(&mut arrays, "query.backbone", &ck.pair.query.backbone);
    push_net(&mut arrays, "query.head", &ck.pair.query.head);
    push_net(&mut arrays, "key.backbone", &ck.pair.key.backbone);
    push_net(&mut arrays, "key.head", &ck.pair.key.head);
    arrays.push(("bank.clean".into(), &clean));
    arrays.push(("bank.adv".into(), &adv));
    for (n, vel) in ck.optimizer.velocity().iter().enumerate() {
        for (i, v) in vel.iter().enumerate() {
            arrays.push((format!("optimizer.{n}.{i}"), v));
        }
    }
    write_container(path, header, &arrays)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let (header, list) = read_container(path)?;
    check_version(&header, "pretrain")?;
    let config: TrainConfig = meta(&header, "config")?;
    let epoch: usize = meta(&header, "epoch")?;
    let metrics: Vec<EpochMetrics> = meta(&header, "metrics")?;
    let bank_meta: HashMap<String, BankMeta> = meta(&header, "banks")?;
    let opt: Value = meta(&header, "optimizer")?;
    let mut arrays = Arrays::new(list);

    let mut pair = init_encoder_pair(&config.arch, config.seed, config.momentum).map_err(|e| AmocError::Incompatible(e.to_string()))?;
    arrays.fill_net("query.backbone", &mut pair.query.backbone)?;
    arrays.fill_net("query.head", &mut pair.query.head)?;
    arrays.fill_net("key.backbone", &mut pair.key.backbone)?;
    arrays.fill_net("key.head", &mut pair.key.head)?;

    let dim = config.arch.embed_dim;
    let mut bank = |name: &str| -> Result<MemoryBank> {
        let storage: Array2<f64> = arrays
            .take(&format!("bank.{name}"), &[config.bank_size, dim])?
            .into_dimensionality()
            .unwrap();
        let m = bank_meta.get(name).ok_or_else(|| AmocError::Format(format!("missing bank metadata {name}")))?;
        MemoryBank::from_parts(storage, m.write_ptr, m.enqueues, m.stamps.clone()).map_err(|e| AmocError::Format(e.to_string()))
    };
    let banks = Banks {
        clean: bank("clean")?,
        adv: bank("adv")?,
    };

    let initialized = opt.get("initialized").and_then(Value::as_bool).unwrap_or(false);
    let mut velocity = Vec::new();
    if initialized {
        for (n, net) in pair.query.networks().iter().enumerate() {
            let mut v = Vec::new();
            for (i, p) in net.params.iter().enumerate() {
                v.push(arrays.take(&format!("optimizer.{n}.{i}"), p.value.shape())?);
            }
            velocity.push(v);
        }
    }
    arrays.finish()?;
    let optimizer = Sgd::from_parts(config.sgd_momentum, config.weight_decay, velocity);
    Ok(Checkpoint {
        config,
        epoch,
        pair,
        banks,
        optimizer,
        metrics,
    })
}

/// A trained classifier plus free-form provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierFile {
    pub arch: ArchConfig,
    pub model: Classifier,
    pub meta: Value,
}

pub fn save_classifier(file: &ClassifierFile, path: impl AsRef<Path>) -> Result<()> {
    let header = json!({
        "kind": "classifier",
        "version": CHECKPOINT_VERSION,
        "arch": file.arch,
        "num_classes": file.model.num_classes,
        "bn": file.model.bn,
        "meta": file.meta,
    });
    let mut arrays = Vec::new();
    push_net(&mut arrays, "classifier.backbone", &file.model.backbone);
    push_net(&mut arrays, "classifier.head", &file.model.head);
    write_container(path, header, &arrays)
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<ClassifierFile> {
    let (header, list) = read_container(path)?;
    check_version(&header, "classifier")?;
    let arch: ArchConfig = meta(&header, "arch")?;
    let num_classes: usize = meta(&header, "num_classes")?;
    let bn: BnMode = meta(&header, "bn")?;
    let mut rng = substream(0, "classifier-shape");
    let enc = DualBnEncoder::new(&arch, &mut rng).map_err(|e| AmocError::Incompatible(e.to_string()))?;
    let mut model = Classifier::from_encoder(&enc, num_classes, bn, &mut rng);
    let mut arrays = Arrays::new(list);
    arrays.fill_net("classifier.backbone", &mut model.backbone)?;
    arrays.fill_net("classifier.head", &mut model.head)?;
    arrays.finish()?;
    Ok(ClassifierFile {
        arch,
        model,
        meta: header.get("meta").cloned().unwrap_or(Value::Null),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            arch: ArchConfig::tiny(),
            bank_size: 64,
            batch_size: 8,
            ..Default::default()
        };
        let mut pair = init_encoder_pair(&config.arch, 3, config.momentum).unwrap();
        pair.key.head.params[0].value.mapv_inplace(|v| v * 0.5 + 0.1);
        let mut banks = Banks::new(64, config.arch.embed_dim, 4).unwrap();
        let keys = Array2::from_shape_fn((10, config.arch.embed_dim), |(i, j)| ((i * 7 + j) as f64).sin());
        banks.adv.enqueue(&keys).unwrap();
        let mut optimizer = Sgd::new(0.9, 5e-4);
        let grads: Vec<_> = pair.query.networks().iter().map(|n| crate::model::Grads::zeros_like(n)).collect();
        let [b, h] = pair.query.networks_mut();
        optimizer.step(&mut [b, h], &[&grads[0], &grads[1]], 0.1);
        Checkpoint {
            config,
            epoch: 2,
            pair,
            banks,
            optimizer,
            metrics: vec![],
        }
    }

    #[test]
    fn round_trip_and_idempotent_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let ck = sample();
        save_checkpoint(&ck, &a).unwrap();
        let back = load_checkpoint(&a).unwrap();
        assert_eq!(back, ck);
        save_checkpoint(&back, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn version_and_corruption_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let ck = sample();
        save_checkpoint(&ck, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(AmocError::Format(_))));
        fs::write(&p, b"garbage!garbage").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(AmocError::Format(_))));

        let (header, arrays) = {
            save_checkpoint(&ck, &p).unwrap();
            read_container(&p).unwrap()
        };
        let mut header = header;
        header["version"] = json!(99);
        let refs: Vec<(String, &Tensor)> = arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_container(&p, header, &refs).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(AmocError::Incompatible(_))));
    }

    #[test]
    fn mismatched_architecture_is_rejected_without_partial_load() {
        let ck = sample();
        let mut other = init_encoder_pair(&ArchConfig::toy(), 1, 0.99).unwrap();
        let before = other.clone();
        assert!(matches!(ck.restore_into(&mut other), Err(AmocError::Incompatible(_))));
        assert_eq!(other, before);
        assert!(ck.check_arch(&ArchConfig::toy()).is_err());
    }

    #[test]
    fn classifier_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.bin");
        let arch = ArchConfig::tiny();
        let mut rng = substream(5, "x");
        let enc = DualBnEncoder::new(&arch, &mut rng).unwrap();
        let model = Classifier::from_encoder(&enc, 4, BnMode::Adv, &mut rng);
        let file = ClassifierFile {
            arch,
            model,
            meta: json!({"protocol": "stdev"}),
        };
        save_classifier(&file, &p).unwrap();
        assert_eq!(load_classifier(&p).unwrap(), file);
        assert!(matches!(load_checkpoint(&p), Err(AmocError::Incompatible(_))));
    }
}
