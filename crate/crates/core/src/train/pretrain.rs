use std::fs;
use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{save_checkpoint, Checkpoint, Sgd, TrainConfig};
use crate::attacks::craft_delta;
use crate::bank::Banks;
use crate::dataio::{make_views, Images, LabeledImageSet};
use crate::error::{arg_err, AmocError, Result};
use crate::losses::{backprop_queries, combined_grad, AmocLoss, Representations, Side};
use crate::model::{init_encoder_pair, BnMode, EncoderPair};
use crate::seed::{substream, SeededRng};

/// One JSONL line of the pre-training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_ccc: f64,
    pub l_variant: f64,
    /// Mean enqueue-count age of the keys in each bank.
    pub bank_age_clean: f64,
    pub bank_age_adv: f64,
    pub keys_enqueued: u64,
}

/// Mini-batches for one epoch: a seeded permutation cut into `batch`-sized
/// chunks, the last one topped up from the start of the permutation.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let steps = n.div_ceil(batch);
    (0..steps).map(|s| (0..batch).map(|j| order[(s * batch + j) % n]).collect()).collect()
}

/// Everything the pre-training loop mutates.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub config: TrainConfig,
    pub pair: EncoderPair,
    pub banks: Banks,
    pub optimizer: Sgd,
    /// Completed epochs.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl PretrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pair = init_encoder_pair(&config.arch, config.seed, config.momentum)?;
        let bank_seed = substream(config.seed, "bank").random::<u64>();
        let banks = Banks::new(config.bank_size, config.arch.embed_dim, bank_seed)?;
        let optimizer = Sgd::new(config.sgd_momentum, config.weight_decay);
        Ok(Self {
            config,
            pair,
            banks,
            optimizer,
            epoch: 0,
            metrics: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Ok(Self {
            config: ck.config,
            pair: ck.pair,
            banks: ck.banks,
            optimizer: ck.optimizer,
            epoch: ck.epoch,
            metrics: ck.metrics,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            pair: self.pair.clone(),
            banks: self.banks.clone(),
            optimizer: self.optimizer.clone(),
            metrics: self.metrics.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn streams(&self, epoch: usize) -> (SeededRng, SeededRng, SeededRng) {
        let s = self.config.seed;
        (
            substream(s, &format!("order/{epoch}")),
            substream(s, &format!("augment/{epoch}")),
            substream(s, &format!("attack/{epoch}")),
        )
    }

    /// Runs the next epoch and appends its metrics.
    pub fn run_epoch(&mut self, data: &LabeledImageSet) -> Result<EpochMetrics> {
        if self.is_done() {
            return arg_err(format!("all {} epochs already run", self.config.epochs));
        }
        if data.is_empty() {
            return arg_err("empty training set");
        }
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch)?;
        let (mut order_rng, mut aug_rng, mut attack_rng) = self.streams(epoch);
        let batches = epoch_batches(data.len(), self.config.batch_size, &mut order_rng);
        let (mut sum, mut ccc, mut var) = (0.0, 0.0, 0.0);
        let keys_before = self.banks.clean.enqueues();
        for (bi, idx) in batches.iter().enumerate() {
            let (view_q, view_k) = self.views(data, idx, &mut aug_rng)?;
            let loss = self.step(&view_q, &view_k, lr, &mut attack_rng).map_err(|e| match e {
                AmocError::Numeric(m) => AmocError::Numeric(format!(
                    "{m} at epoch {epoch}, batch {bi} (root seed {}, streams order/{epoch} augment/{epoch} attack/{epoch})",
                    self.config.seed
                )),
                other => other,
            })?;
            sum += loss.total;
            ccc += loss.ccc;
            var += loss.variant;
        }
        let steps = batches.len();
        let m = EpochMetrics {
            epoch,
            steps,
            lr,
            loss: sum / steps as f64,
            l_ccc: ccc / steps as f64,
            l_variant: var / steps as f64,
            bank_age_clean: self.banks.clean.mean_age(),
            bank_age_adv: self.banks.adv.mean_age(),
            keys_enqueued: (self.banks.clean.enqueues() - keys_before) * self.config.batch_size as u64,
        };
        self.epoch += 1;
        self.metrics.push(m.clone());
        Ok(m)
    }

    fn views(&self, data: &LabeledImageSet, idx: &[usize], rng: &mut SeededRng) -> Result<(Images, Images)> {
        let side = data.side();
        let c = data.images.shape()[1];
        let mut a = Array4::zeros((idx.len(), c, side, side));
        let mut b = a.clone();
        for (j, &i) in idx.iter().enumerate() {
            let (va, vb) = make_views(data.image(i), &self.config.augment, rng)?;
            a.index_axis_mut(Axis(0), j).assign(&va);
            b.index_axis_mut(Axis(0), j).assign(&vb);
        }
        Ok((a, b))
    }

    /// One optimizer step on a pair of augmented views.
    pub fn step(&mut self, view_q: &Images, view_k: &Images, lr: f64, attack_rng: &mut SeededRng) -> Result<AmocLoss> {
        let cfg = &self.config;
        let t = cfg.weights.temperature;
        let neg_clean = self.banks.clean.negatives();
        let neg_adv = self.banks.adv.negatives();

        let (k_clean, _) = self.pair.key.forward_train(view_k, BnMode::Clean, false)?;
        let delta = craft_delta(&self.pair.query, &k_clean, &neg_adv, view_q, &cfg.attack, t, attack_rng)?;
        let x_adv = view_q + &delta;
        let (q_clean, tape_clean) = self.pair.query.forward_train(view_q, BnMode::Clean, true)?;
        let (q_adv, tape_adv) = self.pair.query.forward_train(&x_adv, BnMode::Adv, cfg.variant.query == Side::Adv)?;
        let (k_adv, _) = self.pair.key.forward_train(&x_adv, BnMode::Adv, false)?;

        let reps = Representations {
            q_clean,
            q_adv: Some(q_adv),
            k_clean,
            k_adv: Some(k_adv),
        };
        let (loss, d_clean, d_adv) = combined_grad(&reps, &neg_clean, &neg_adv, cfg.variant, &cfg.weights)?;
        if !loss.total.is_finite() {
            return Err(AmocError::Numeric(format!("non-finite loss {loss:?}")));
        }
        let tapes = crate::losses::QueryTapes {
            clean: tape_clean,
            adv: tape_adv,
        };
        let grads = backprop_queries(&self.pair.query, &tapes, &d_clean, d_adv.as_ref());
        let [backbone, head] = self.pair.query.networks_mut();
        self.optimizer.step(&mut [backbone, head], &[&grads.backbone, &grads.head], lr);
        self.pair.momentum_update()?;
        self.banks.clean.enqueue(&reps.k_clean)?;
        self.banks.adv.enqueue(reps.k_adv.as_ref().unwrap())?;
        Ok(loss)
    }
}

#[derive(Default)]
pub struct PretrainOptions<'a> {
    /// JSONL log, rewritten from the resumed history and appended per epoch.
    pub metrics_path: Option<PathBuf>,
    /// Checkpoint written after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many epochs in this call (the run stays resumable).
    pub max_epochs: Option<usize>,
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<&'a mut dyn FnMut(&PretrainState) -> Result<()>>,
}

pub fn pretrain(config: &TrainConfig, data: &LabeledImageSet) -> Result<Checkpoint> {
    pretrain_with(config, data, PretrainOptions::default())
}

pub fn pretrain_with(config: &TrainConfig, data: &LabeledImageSet, mut opts: PretrainOptions<'_>) -> Result<Checkpoint> {
    data.validate()?;
    if data.images.shape()[1] != config.arch.in_channels {
        return arg_err(format!("data has {} channels, encoder expects {}", data.images.shape()[1], config.arch.in_channels));
    }
    let mut state = match opts.resume.take() {
        Some(ck) => {
            if &ck.config != config {
                return Err(AmocError::Incompatible("resume checkpoint was trained with a different config".into()));
            }
            PretrainState::from_checkpoint(ck)?
        }
        None => PretrainState::new(config.clone())?,
    };
    let mut log = match &opts.metrics_path {
        Some(p) => {
            let mut f = fs::File::create(p)?;
            for m in &state.metrics {
                writeln!(f, "{}", serde_json::to_string(m)?)?;
            }
            Some(f)
        }
        None => None,
    };
    let mut ran = 0;
    while !state.is_done() && opts.max_epochs.is_none_or(|m| ran < m) {
        let m = state.run_epoch(data)?;
        ran += 1;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&m)?)?;
            f.flush()?;
        }
        if let Some(p) = &opts.checkpoint_path {
            save_checkpoint(&state.to_checkpoint(), p)?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&state)?;
        }
    }
    Ok(state.to_checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_toy_dataset;
    use crate::model::ArchConfig;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            arch: ArchConfig::tiny(),
            batch_size: 8,
            bank_size: 32,
            epochs: 2,
            warmup_epochs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn batches_wrap_to_full_size() {
        let b = epoch_batches(10, 4, &mut substream(0, "o"));
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|x| x.len() == 4));
        let mut seen: Vec<usize> = b.concat()[..10].to_vec();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_enqueues_full_batches_into_each_bank() {
        let data = synth_toy_dataset(1, 20, 2, 8).unwrap();
        let mut st = PretrainState::new(tiny_config()).unwrap();
        let m = st.run_epoch(&data).unwrap();
        assert_eq!(m.steps, 3);
        assert_eq!(m.keys_enqueued, 24);
        assert_eq!(st.banks.clean.enqueues(), 3);
        assert_eq!(st.banks.adv.enqueues(), 3);
        assert!(m.loss.is_finite());
    }

    #[test]
    fn key_moves_only_by_momentum() {
        let data = synth_toy_dataset(2, 16, 2, 8).unwrap();
        let mut st = PretrainState::new(tiny_config()).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let (x, _) = data.gather(&idx);
        let key0 = st.pair.key.clone();
        st.step(&x, &x, 0.1, &mut substream(0, "a")).unwrap();
        let m = st.pair.momentum;
        for (net_q, (net_k, net_k0)) in st.pair.query.networks().iter().zip(st.pair.key.networks().iter().zip(key0.networks())) {
            for (pq, (pk, pk0)) in net_q.params.iter().zip(net_k.params.iter().zip(&net_k0.params)) {
                let mut expect = pk0.value.clone();
                expect.zip_mut_with(&pq.value, |k, &q| *k += (1.0 - m) * (q - *k));
                assert_eq!(pk.value, expect);
            }
        }
    }

    #[test]
    fn resume_matches_straight_run() {
        let data = synth_toy_dataset(3, 16, 2, 8).unwrap();
        let cfg = TrainConfig { epochs: 3, ..tiny_config() };
        let full = pretrain(&cfg, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckp = dir.path().join("ck.bin");
        pretrain_with(
            &cfg,
            &data,
            PretrainOptions {
                checkpoint_path: Some(ckp.clone()),
                max_epochs: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let resumed = pretrain_with(
            &cfg,
            &data,
            PretrainOptions {
                resume: Some(super::super::load_checkpoint(&ckp).unwrap()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resumed, full);
    }
}
