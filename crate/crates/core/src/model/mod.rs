//! Dual-BN encoders, the momentum encoder pair and classifiers built on them.

mod classifier;
mod encoder;
mod network;

pub use classifier::{Classifier, ClassifierGrads, ClassifierTape};
pub use encoder::{init_encoder_pair, ArchConfig, DualBnEncoder, EncoderGrads, EncoderPair, EncoderTape};
pub use network::{BnMode, BnPass, Buffer, Grads, Network, NetworkBuilder, Param, PendingStats, Tape, Tensor};

#[allow(unused_imports)]
pub(crate) use encoder::{l2_normalize, l2_normalize_backward};

use ndarray::Array2;

use crate::dataio::Images;
use crate::error::{arg_err, Result};

/// Anything that maps an image batch to class logits in eval mode and can
/// backpropagate a logit-space gradient to its input.
pub trait LogitModel {
    fn num_classes(&self) -> usize;

    fn logits(&self, x: &Images) -> Array2<f64>;

    /// Logits at `x` plus the input gradient of `Σ upstream(logits) ⊙ logits`,
    /// where `upstream` picks the logit-space cotangent from the logits.
    fn logits_and_vjp(&self, x: &Images, upstream: &dyn Fn(&Array2<f64>) -> Array2<f64>) -> (Array2<f64>, Images);

    /// Argmax prediction, lowest index on ties.
    fn predict(&self, x: &Images) -> Vec<usize> {
        argmax_rows(&self.logits(x))
    }
}

pub fn argmax_rows(z: &Array2<f64>) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn to_tensor(x: &Images) -> Tensor {
    x.as_standard_layout().into_owned().into_dyn()
}

pub(crate) fn from_tensor2(t: Tensor) -> Array2<f64> {
    t.into_dimensionality().expect("rank-2 output")
}

pub(crate) fn check_images(x: &Images, channels: usize) -> Result<()> {
    let s = x.shape();
    if s[1] != channels {
        return arg_err(format!("expected {channels} channels, got shape {s:?}"));
    }
    if s[0] == 0 {
        return arg_err("empty batch");
    }
    Ok(())
}
