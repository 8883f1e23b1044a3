use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::network::{BnMode, BnPass, Grads, LayerDef, Network, NetworkBuilder, PendingStats, Tape};
use super::{check_images, from_tensor2, to_tensor};
use crate::dataio::Images;
use crate::error::{AmocError, Result};
use crate::seed::{substream, SeededRng};

/// Encoder architecture. `convnet` stacks conv-BN-ReLU blocks with the given
/// widths and strides; `resnet18` ignores them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub name: String,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub embed_dim: usize,
    pub in_channels: usize,
}

impl Default for ArchConfig {
    /// Four conv blocks, about 0.3M parameters, 128-d embeddings.
    fn default() -> Self {
        Self {
            name: "convnet".into(),
            widths: vec![32, 64, 128, 128],
            strides: vec![1, 2, 2, 2],
            embed_dim: 128,
            in_channels: 3,
        }
    }
}

impl ArchConfig {
    /// Two conv blocks sized for the 16×16 synthetic corpus.
    pub fn toy() -> Self {
        Self {
            widths: vec![16, 32],
            strides: vec![2, 2],
            ..Self::default()
        }
    }

    /// Two blocks of widths 32 and 64, the encoder of the desk-scale trend runs.
    pub fn desk() -> Self {
        Self {
            widths: vec![32, 64],
            strides: vec![2, 2],
            ..Self::default()
        }
    }

    /// About 1k parameters; used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            widths: vec![6, 10],
            strides: vec![2, 2],
            embed_dim: 16,
            ..Self::default()
        }
    }

    pub fn resnet18() -> Self {
        Self {
            name: "resnet18".into(),
            widths: vec![],
            strides: vec![],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.name.as_str() {
            "convnet" => {
                if self.widths.is_empty() || self.widths.len() != self.strides.len() {
                    return Err(AmocError::Config(
                        "convnet needs equally long, non-empty widths and strides".into(),
                    ));
                }
                if self.widths.contains(&0) || self.strides.contains(&0) {
                    return Err(AmocError::Config("widths and strides must be positive".into()));
                }
            }
            "resnet18" => {}
            other => return Err(AmocError::Config(format!("unsupported architecture `{other}`"))),
        }
        if self.embed_dim == 0 || self.in_channels == 0 {
            return Err(AmocError::Config("embed_dim and in_channels must be positive".into()));
        }
        Ok(())
    }
}

fn build_backbone(arch: &ArchConfig, rng: &mut SeededRng) -> Result<(Network, usize)> {
    arch.validate()?;
    let mut b = NetworkBuilder::new(rng);
    let mut layers: Vec<LayerDef> = Vec::new();
    let feature_dim = match arch.name.as_str() {
        "convnet" => {
            let mut cin = arch.in_channels;
            for (i, (&w, &s)) in arch.widths.iter().zip(&arch.strides).enumerate() {
                layers.push(b.conv(&format!("block{i}.conv"), cin, w, 3, s, 1));
                layers.push(b.dual_bn(&format!("block{i}.bn"), w));
                layers.push(b.relu());
                cin = w;
            }
            cin
        }
        _ => {
            layers.push(b.conv("stem.conv", arch.in_channels, 64, 3, 1, 1));
            layers.push(b.dual_bn("stem.bn", 64));
            layers.push(b.relu());
            let mut cin = 64;
            for (stage, (w, s)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
                for blk in 0..2 {
                    let stride = if blk == 0 { s } else { 1 };
                    let p = format!("layer{}.{blk}", stage + 1);
                    let body = vec![
                        b.conv(&format!("{p}.conv1"), cin, w, 3, stride, 1),
                        b.dual_bn(&format!("{p}.bn1"), w),
                        b.relu(),
                        b.conv(&format!("{p}.conv2"), w, w, 3, 1, 1),
                        b.dual_bn(&format!("{p}.bn2"), w),
                    ];
                    let shortcut = if stride != 1 || cin != w {
                        vec![
                            b.conv(&format!("{p}.down.conv"), cin, w, 1, stride, 0),
                            b.dual_bn(&format!("{p}.down.bn"), w),
                        ]
                    } else {
                        vec![]
                    };
                    layers.push(b.residual(body, shortcut));
                    layers.push(b.relu());
                    cin = w;
                }
            }
            cin
        }
    };
    layers.push(b.global_avg_pool());
    Ok((b.finish(layers), feature_dim))
}

/// Backbone with dual batch norm followed by a two-layer projection head
/// (also dual BN) and L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBnEncoder {
    pub backbone: Network,
    pub head: Network,
    pub arch: ArchConfig,
    pub feature_dim: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderTape {
    backbone: Tape,
    head: Tape,
    z: Array2<f64>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub backbone: Grads,
    pub head: Grads,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &DualBnEncoder) -> Self {
        Self {
            backbone: Grads::zeros_like(&enc.backbone),
            head: Grads::zeros_like(&enc.head),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        self.backbone.add_assign(&other.backbone);
        self.head.add_assign(&other.head);
    }
}

impl DualBnEncoder {
    pub fn new(arch: &ArchConfig, rng: &mut SeededRng) -> Result<Self> {
        let (backbone, feature_dim) = build_backbone(arch, rng)?;
        let mut b = NetworkBuilder::new(rng);
        let layers = vec![
            b.linear("head.fc1", feature_dim, feature_dim, false),
            b.dual_bn("head.bn", feature_dim),
            b.relu(),
            b.linear("head.fc2", feature_dim, arch.embed_dim, true),
        ];
        Ok(Self {
            backbone,
            head: b.finish(layers),
            arch: arch.clone(),
            feature_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params() + self.head.num_params()
    }

    pub fn networks(&self) -> [&Network; 2] {
        [&self.backbone, &self.head]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 2] {
        [&mut self.backbone, &mut self.head]
    }

    /// Embeds a batch without mutating running statistics. `BnPass::Train`
    /// behaves like `TrainNoStats` here; use [`Self::forward_train`] to advance them.
    pub fn forward(&self, x: &Images, bn: BnMode, pass: BnPass, keep_tape: bool) -> Result<(Array2<f64>, Option<EncoderTape>)> {
        let pass = if pass == BnPass::Train { BnPass::TrainNoStats } else { pass };
        let (z, tape, _) = self.run(x, bn, pass, keep_tape)?;
        Ok((z, tape))
    }

    /// Training-mode forward: batch statistics, the selected branch's
    /// running statistics advance.
    pub fn forward_train(&mut self, x: &Images, bn: BnMode, keep_tape: bool) -> Result<(Array2<f64>, Option<EncoderTape>)> {
        let (z, tape, stats) = self.run(x, bn, BnPass::Train, keep_tape)?;
        self.apply_pending(stats);
        Ok((z, tape))
    }

    /// Eval-mode embedding of a batch.
    pub fn embed(&self, x: &Images, bn: BnMode) -> Result<Array2<f64>> {
        Ok(self.forward(x, bn, BnPass::Eval, false)?.0)
    }

    pub(crate) fn apply_pending(&mut self, stats: PendingStats) {
        self.backbone.apply_stats(stats.backbone);
        self.head.apply_stats(stats.head);
    }

    pub(crate) fn run(&self, x: &Images, bn: BnMode, pass: BnPass, keep_tape: bool) -> Result<(Array2<f64>, Option<EncoderTape>, PendingStats)> {
        check_images(x, self.arch.in_channels)?;
        let (feat, tb, sb) = self.backbone.run(&to_tensor(x), bn, pass, keep_tape);
        let (h, th, sh) = self.head.run(&feat, bn, pass, keep_tape);
        let h = from_tensor2(h);
        let (z, norms) = l2_normalize(&h);
        let tape = match (tb, th) {
            (Some(backbone), Some(head)) => Some(EncoderTape {
                backbone,
                head,
                z: z.clone(),
                norms,
            }),
            _ => None,
        };
        Ok((z, tape, PendingStats { backbone: sb, head: sh }))
    }

    /// Backpropagates a gradient on the unit embeddings. Returns the input
    /// gradient when `need_input` is set.
    pub fn backward(&self, tape: &EncoderTape, grad_z: &Array2<f64>, grads: Option<&mut EncoderGrads>, need_input: bool) -> Option<Images> {
        let gh = l2_normalize_backward(&tape.z, &tape.norms, grad_z);
        let (gb, gh_) = match grads {
            Some(g) => (Some(&mut g.backbone), Some(&mut g.head)),
            None => (None, None),
        };
        let gfeat = self.head.backward(&tape.head, gh.into_dyn(), gh_, true)?;
        let gx = self.backbone.backward(&tape.backbone, gfeat, gb, need_input)?;
        Some(gx.into_dimensionality().expect("rank-4 input gradient"))
    }
}

pub(crate) fn l2_normalize(h: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut z = h.clone();
    let mut norms = Vec::with_capacity(h.nrows());
    for mut row in z.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (z, norms)
}

pub(crate) fn l2_normalize_backward(z: &Array2<f64>, norms: &[f64], gz: &Array2<f64>) -> Array2<f64> {
    let mut gh = gz.clone();
    for ((mut g, zr), &n) in gh.axis_iter_mut(Axis(0)).zip(z.axis_iter(Axis(0))).zip(norms) {
        let dot = g.dot(&zr);
        g.zip_mut_with(&zr, |gv, &zv| *gv = (*gv - zv * dot) / n);
    }
    gh
}

/// Query encoder, key encoder and the momentum coefficient blending them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub query: DualBnEncoder,
    pub key: DualBnEncoder,
    pub momentum: f64,
}

/// Builds the query encoder from `seed` and deep-copies it into the key.
pub fn init_encoder_pair(arch: &ArchConfig, seed: u64, momentum: f64) -> Result<EncoderPair> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(AmocError::Config(format!("momentum {momentum} outside (0,1)")));
    }
    let mut rng = substream(seed, "init");
    let query = DualBnEncoder::new(arch, &mut rng)?;
    Ok(EncoderPair {
        key: query.clone(),
        query,
        momentum,
    })
}

impl EncoderPair {
    /// `θ_k ← m·θ_k + (1 − m)·θ_q` over learnable parameters. Running
    /// statistics of the key are left to its own forwards.
    pub fn momentum_update(&mut self) -> Result<()> {
        let m = self.momentum;
        for (q, k) in self.query.networks().into_iter().zip(self.key.networks_mut()) {
            if !q.same_architecture(k) {
                return Err(AmocError::Internal("query/key architecture drift".into()));
            }
            for (pq, pk) in q.params.iter().zip(k.params.iter_mut()) {
                pk.value.zip_mut_with(&pq.value, |kv, &qv| *kv += (1.0 - m) * (qv - *kv));
            }
        }
        Ok(())
    }
}
