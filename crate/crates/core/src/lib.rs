//! Adversarial momentum-contrastive pre-training.
//!
//! The crate provides a contrastive trainer with separate clean and
//! adversarial FIFO memory banks, encoders with dual batch normalization,
//! a momentum-updated key encoder, gradient-based attacks (FGSM, PGD in
//! ℓ∞/ℓ2/ℓ1, SLIDE, DeepFool, C&W), linear-evaluation and adversarial
//! fine-tuning protocols, and JSON/SVG reporting.

pub mod attacks;
pub mod cli;
pub mod bank;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod seed;
pub mod train;

pub use error::{AmocError, Result};
