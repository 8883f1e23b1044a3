use std::f64::consts::PI;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledImageSet;
use crate::error::{arg_err, Result};
use crate::seed::substream;

/// Knobs of the synthetic corpus. Every image is a mid-gray canvas carrying
/// a luminance grating whose orientation encodes the class, a faint
/// high-frequency grating of the same orientation, a faint fixed per-class
/// pixel pattern and pixel noise. Instance-specific Gaussian color blobs can
/// be added; they are off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyParams {
    pub grating_amp: f64,
    /// Relative per-sample jitter of the grating amplitude.
    pub grating_jitter: f64,
    /// Relative per-sample jitter of the grating frequency.
    pub freq_jitter: f64,
    /// Grating cycles across the image side.
    pub cycles: f64,
    /// Half-width in radians of the uniform per-sample orientation jitter
    /// around the class orientation.
    pub orientation_jitter: f64,
    pub fine_amp: f64,
    pub fine_cycles: f64,
    pub pattern_amp: f64,
    pub blobs: usize,
    pub blob_amp: f64,
    pub noise_std: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            grating_amp: 0.08,
            grating_jitter: 0.2,
            freq_jitter: 0.2,
            cycles: 3.0,
            orientation_jitter: 0.0,
            fine_amp: 0.02,
            fine_cycles: 6.0,
            pattern_amp: 0.02,
            blobs: 0,
            blob_amp: 0.2,
            noise_std: 0.03,
        }
    }
}

struct ClassStyle {
    /// Grating orientation in [0, π/2], so a horizontal flip keeps classes apart.
    theta: f64,
    pattern: Array3<f64>,
}

fn class_styles(classes: usize, side: usize) -> Vec<ClassStyle> {
    // The class geometry only depends on (classes, side) so that train and
    // test draws with different seeds share it.
    let mut rng = substream((classes as u64) << 32 | side as u64, "toy-world");
    (0..classes)
        .map(|k| {
            let theta = if classes == 1 { 0.0 } else { 0.5 * PI * k as f64 / (classes - 1) as f64 };
            let pattern = Array3::from_shape_fn((3, side, side), |_| {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            });
            ClassStyle { theta, pattern }
        })
        .collect()
}

/// Deterministic labeled corpus of `n` images with `classes` balanced classes.
pub fn synth_toy_dataset(seed: u64, n: usize, classes: usize, side: usize) -> Result<LabeledImageSet> {
    synth_toy_dataset_with(seed, n, classes, side, &ToyParams::default())
}

pub fn synth_toy_dataset_with(
    seed: u64,
    n: usize,
    classes: usize,
    side: usize,
    params: &ToyParams,
) -> Result<LabeledImageSet> {
    if classes == 0 || n < classes {
        return arg_err(format!("need n >= classes > 0, got n={n}, classes={classes}"));
    }
    if side < 8 {
        return arg_err(format!("side must be >= 8, got {side}"));
    }
    let styles = class_styles(classes, side);
    let mut rng = substream(seed, "toy-samples");
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, params.noise_std.max(0.0)).unwrap();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut images = Array4::<f64>::zeros((n, 3, side, side));
    let s = side as f64;
    for (i, &y) in labels.iter().enumerate() {
        let style = &styles[y];
        let amp = params.grating_amp * (1.0 + params.grating_jitter * unit.sample(&mut rng)).max(0.0);
        let freq = 2.0 * PI * params.cycles / s * (1.0 + params.freq_jitter * unit.sample(&mut rng)).max(0.25);
        let phase = rng.random_range(0.0..2.0 * PI);
        let fine_freq = 2.0 * PI * params.fine_cycles / s;
        let fine_phase = rng.random_range(0.0..2.0 * PI);
        let jitter = params.orientation_jitter.abs();
        let theta = style.theta + if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        let (sin_t, cos_t) = theta.sin_cos();
        let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..params.blobs)
            .map(|_| {
                let cy = rng.random_range(0.0..s);
                let cx = rng.random_range(0.0..s);
                let r = rng.random_range(0.1 * s..0.3 * s);
                let col = [
                    params.blob_amp * unit.sample(&mut rng),
                    params.blob_amp * unit.sample(&mut rng),
                    params.blob_amp * unit.sample(&mut rng),
                ];
                (cy, cx, r, col)
            })
            .collect();
        for c in 0..3 {
            for yy in 0..side {
                for xx in 0..side {
                    let u = cos_t * yy as f64 + sin_t * xx as f64;
                    let mut v = 0.5
                        + amp * (freq * u + phase).sin()
                        + params.fine_amp * (fine_freq * u + fine_phase).sin()
                        + params.pattern_amp * style.pattern[[c, yy, xx]];
                    for &(cy, cx, r, col) in &blobs {
                        let d2 = (yy as f64 - cy).powi(2) + (xx as f64 - cx).powi(2);
                        v += col[c] * (-d2 / (2.0 * r * r)).exp();
                    }
                    v += noise.sample(&mut rng);
                    images[[i, c, yy, xx]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    LabeledImageSet::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Axis};

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = synth_toy_dataset(1, 200, 2, 16).unwrap();
        let b = synth_toy_dataset(1, 200, 2, 16).unwrap();
        assert_eq!(a, b);
        let c = synth_toy_dataset(2, 200, 2, 16).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn two_classes_give_label_set_zero_one() {
        let a = synth_toy_dataset(1, 200, 2, 16).unwrap();
        let mut set: Vec<usize> = a.labels.clone();
        set.sort();
        set.dedup();
        assert_eq!(set, vec![0, 1]);
        assert!(a.images.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn argument_errors() {
        assert!(synth_toy_dataset(1, 1, 2, 16).is_err());
        assert!(synth_toy_dataset(1, 10, 2, 7).is_err());
    }

    /// Least-squares linear classifier on raw pixels (ridge-regularized
    /// normal equations solved by Cholesky) as a separability oracle.
    #[test]
    fn raw_pixels_linearly_separable() {
        let set = synth_toy_dataset(1, 200, 2, 16).unwrap();
        let n = set.len();
        let d = set.images.len() / n;
        let mut x = Array2::<f64>::ones((n, d + 1));
        for i in 0..n {
            for (j, v) in set.images.index_axis(Axis(0), i).iter().enumerate() {
                x[[i, j]] = *v;
            }
        }
        let t = Array1::from_iter(set.labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }));
        // dual form: w = Xᵀ (X Xᵀ + αI)⁻¹ t, n < d
        let mut gram = x.dot(&x.t());
        for i in 0..n {
            gram[[i, i]] += 1e-3;
        }
        let g = nalgebra::DMatrix::from_fn(n, n, |i, j| gram[[i, j]]);
        let rhs = nalgebra::DVector::from_fn(n, |i, _| t[i]);
        let alpha = g.cholesky().unwrap().solve(&rhs);
        let alpha = Array1::from_iter(alpha.iter().copied());
        let w = x.t().dot(&alpha);
        let pred = x.dot(&w);
        let correct = pred.iter().zip(t.iter()).filter(|(p, t)| p.signum() == t.signum()).count();
        assert!(correct as f64 / n as f64 >= 0.95, "train accuracy {}", correct as f64 / n as f64);
    }
}
