use ndarray::Array2;

use super::encoder::DualBnEncoder;
use super::network::{BnMode, BnPass, Grads, Network, NetworkBuilder, PendingStats, Tape};
use super::{check_images, from_tensor2, to_tensor, LogitModel};
use crate::dataio::Images;
use crate::error::Result;
use crate::seed::SeededRng;

/// Encoder backbone (projection head dropped) plus a linear class head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub backbone: Network,
    pub head: Network,
    pub bn: BnMode,
    pub num_classes: usize,
    pub in_channels: usize,
}

#[derive(Debug, Clone)]
pub struct ClassifierTape {
    backbone: Tape,
    head: Tape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub backbone: Grads,
    pub head: Grads,
}

impl ClassifierGrads {
    pub fn zeros_like(c: &Classifier) -> Self {
        Self {
            backbone: Grads::zeros_like(&c.backbone),
            head: Grads::zeros_like(&c.head),
        }
    }
}

impl Classifier {
    /// Attaches a freshly initialized linear head to a copy of `enc`'s backbone.
    pub fn from_encoder(enc: &DualBnEncoder, num_classes: usize, bn: BnMode, rng: &mut SeededRng) -> Self {
        let mut b = NetworkBuilder::new(rng);
        let layers = vec![b.linear("classifier", enc.feature_dim, num_classes, true)];
        Self {
            backbone: enc.backbone.clone(),
            head: b.finish(layers),
            bn,
            num_classes,
            in_channels: enc.arch.in_channels,
        }
    }

    pub fn networks(&self) -> [&Network; 2] {
        [&self.backbone, &self.head]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 2] {
        [&mut self.backbone, &mut self.head]
    }

    /// Backbone features (eval statistics).
    pub fn features(&self, x: &Images) -> Result<Array2<f64>> {
        check_images(x, self.in_channels)?;
        Ok(from_tensor2(self.backbone.forward_eval(&to_tensor(x), self.bn)))
    }

    /// Head logits for precomputed features.
    pub fn head_logits(&self, feats: &Array2<f64>) -> Array2<f64> {
        from_tensor2(self.head.forward_eval(&feats.clone().into_dyn(), self.bn))
    }

    pub fn forward(&self, x: &Images, pass: BnPass, keep_tape: bool) -> Result<(Array2<f64>, Option<ClassifierTape>)> {
        let pass = if pass == BnPass::Train { BnPass::TrainNoStats } else { pass };
        check_images(x, self.in_channels)?;
        let (f, tb, _) = self.backbone.run(&to_tensor(x), self.bn, pass, keep_tape);
        let (z, th, _) = self.head.run(&f, self.bn, pass, keep_tape);
        let tape = tb.zip(th).map(|(backbone, head)| ClassifierTape { backbone, head });
        Ok((from_tensor2(z), tape))
    }

    /// Batch-statistics forward that advances the BN running statistics.
    pub fn forward_train(&mut self, x: &Images) -> Result<(Array2<f64>, ClassifierTape)> {
        let (z, tape, stats) = self.run(x, BnPass::Train, true)?;
        self.apply_pending(stats);
        Ok((z, tape.expect("tape requested")))
    }

    pub(crate) fn run(&self, x: &Images, pass: BnPass, keep_tape: bool) -> Result<(Array2<f64>, Option<ClassifierTape>, PendingStats)> {
        check_images(x, self.in_channels)?;
        let (f, tb, sb) = self.backbone.run(&to_tensor(x), self.bn, pass, keep_tape);
        let (z, th, sh) = self.head.run(&f, self.bn, pass, keep_tape);
        let tape = tb.zip(th).map(|(backbone, head)| ClassifierTape { backbone, head });
        Ok((from_tensor2(z), tape, PendingStats { backbone: sb, head: sh }))
    }

    pub(crate) fn apply_pending(&mut self, stats: PendingStats) {
        self.backbone.apply_stats(stats.backbone);
        self.head.apply_stats(stats.head);
    }

    /// Backpropagates a logit gradient. With `grads == None` only the input
    /// gradient is produced.
    pub fn backward(&self, tape: &ClassifierTape, grad_logits: &Array2<f64>, grads: Option<&mut ClassifierGrads>, need_input: bool) -> Option<Images> {
        let (gb, gh) = match grads {
            Some(g) => (Some(&mut g.backbone), Some(&mut g.head)),
            None => (None, None),
        };
        let train_backbone = gb.is_some();
        let gf = self.head.backward(&tape.head, grad_logits.clone().into_dyn(), gh, need_input || train_backbone)?;
        let gx = self.backbone.backward(&tape.backbone, gf, gb, need_input)?;
        Some(gx.into_dimensionality().expect("rank-4 input gradient"))
    }
}

impl LogitModel for Classifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &Images) -> Array2<f64> {
        self.forward(x, BnPass::Eval, false).expect("classifier input shape").0
    }

    fn logits_and_vjp(&self, x: &Images, upstream: &dyn Fn(&Array2<f64>) -> Array2<f64>) -> (Array2<f64>, Images) {
        let (z, tape) = self.forward(x, BnPass::Eval, true).expect("classifier input shape");
        let g = upstream(&z);
        let gx = self.backward(&tape.unwrap(), &g, None, true).unwrap();
        (z, gx)
    }
}
