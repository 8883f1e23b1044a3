use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};


use crate::dataio::Images;
use crate::error::{arg_err, AmocError, Result};
use crate::model::{argmax_rows, LogitModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwConfig {
    pub steps: usize,
    pub lr: f64,
    pub confidence: f64,
    pub binary_search_steps: usize,
    pub initial_const: f64,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            steps: 1000,
            lr: 0.01,
            confidence: 0.0,
            binary_search_steps: 9,
            initial_const: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CwResult {
    /// Smallest-ℓ2 misclassified iterate per sample, or the clean input.
    pub adv: Images,
    pub success: Vec<bool>,
    pub l2: Vec<f64>,
}

const TANH_SHRINK: f64 = 0.999_999;

/// Carlini-Wagner ℓ2 attack: Adam in tanh space on
/// `‖x' - x‖² + c · max(z_y - max_{j≠y} z_j, -κ)` with a per-sample binary
/// search over `c`.
pub fn cw_l2<M: LogitModel + ?Sized>(model: &M, x: &Images, labels: &[usize], cfg: &CwConfig) -> Result<CwResult> {
    let n = x.shape()[0];
    if labels.len() != n {
        return arg_err(format!("{} labels for {n} images", labels.len()));
    }
    if !(cfg.lr > 0.0) || !(cfg.initial_const > 0.0) || !(cfg.confidence >= 0.0) {
        return arg_err("C&W needs lr > 0, initial_const > 0 and confidence >= 0");
    }
    let w0 = x.mapv(|v| ((2.0 * v - 1.0) * TANH_SHRINK).atanh());
    let mut best_adv = x.clone();
    let mut best_l2 = vec![f64::INFINITY; n];
    let mut consts = vec![cfg.initial_const; n];
    let mut lower = vec![0.0f64; n];
    let mut upper = vec![1e10f64; n];
    let kappa = cfg.confidence;

    for _ in 0..cfg.binary_search_steps.max(1) {
        let mut w = w0.clone();
        let mut m1 = Images::zeros(x.raw_dim());
        let mut m2 = Images::zeros(x.raw_dim());
        let mut hit = vec![false; n];
        for t in 1..=cfg.steps {
            let xa = w.mapv(|v| (v.tanh() + 1.0) / 2.0);
            let cs = consts.clone();
            let (z, g_logit) = model.logits_and_vjp(&xa, &|z: &Array2<f64>| margin_cotangent(z, labels, &cs, kappa));
            if z.iter().any(|v| !v.is_finite()) {
                return Err(AmocError::Numeric("non-finite logits in C&W".into()));
            }
            let pred = argmax_rows(&z);
            for i in 0..n {
                if pred[i] == labels[i] || margin(&z, i, labels[i]) < kappa {
                    continue;
                }
                let d: f64 = xa
                    .index_axis(Axis(0), i)
                    .iter()
                    .zip(x.index_axis(Axis(0), i).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                hit[i] = true;
                if d < best_l2[i] {
                    best_l2[i] = d;
                    best_adv.index_axis_mut(Axis(0), i).assign(&xa.index_axis(Axis(0), i));
                }
            }
            let mut grad = &xa - x;
            grad.mapv_inplace(|v| 2.0 * v);
            grad += &g_logit;
            ndarray::Zip::from(&mut grad).and(&w).for_each(|g, &wv| {
                let th = wv.tanh();
                *g *= (1.0 - th * th) / 2.0;
            });
            adam(&mut w, &grad, &mut m1, &mut m2, cfg.lr, t);
        }
        for i in 0..n {
            if hit[i] {
                upper[i] = upper[i].min(consts[i]);
                consts[i] = (lower[i] + upper[i]) / 2.0;
            } else {
                lower[i] = lower[i].max(consts[i]);
                consts[i] = if upper[i] < 1e9 { (lower[i] + upper[i]) / 2.0 } else { consts[i] * 10.0 };
            }
        }
    }
    let success: Vec<bool> = best_l2.iter().map(|d| d.is_finite()).collect();
    let l2 = best_l2.iter().map(|d| if d.is_finite() { d.sqrt() } else { f64::INFINITY }).collect();
    Ok(CwResult { adv: best_adv, success, l2 })
}

fn margin(z: &Array2<f64>, i: usize, y: usize) -> f64 {
    let other = (0..z.ncols()).filter(|&j| j != y).map(|j| z[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
    other - z[[i, y]]
}

fn margin_cotangent(z: &Array2<f64>, labels: &[usize], consts: &[f64], kappa: f64) -> Array2<f64> {
    let mut u = Array2::zeros(z.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        let mut jmax = usize::MAX;
        for j in 0..z.ncols() {
            if j != y && (jmax == usize::MAX || z[[i, j]] > z[[i, jmax]]) {
                jmax = j;
            }
        }
        if jmax == usize::MAX {
            continue;
        }
        if z[[i, y]] - z[[i, jmax]] > -kappa {
            u[[i, y]] = consts[i];
            u[[i, jmax]] = -consts[i];
        }
    }
    u
}

fn adam(w: &mut Images, g: &Images, m1: &mut Images, m2: &mut Images, lr: f64, t: usize) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    ndarray::Zip::from(w).and(g).and(m1).and(m2).for_each(|w, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::deepfool::tests::Affine;
    use ndarray::Array4;

    #[test]
    fn zero_iterations_fail() {
        let mut w = Array2::zeros((2, 4));
        w[[1, 0]] = 2.0;
        let m = Affine { w, b: vec![0.0, -1.0] };
        let x = Array4::from_elem((1, 1, 2, 2), 0.3);
        let cfg = CwConfig { steps: 0, ..CwConfig::default() };
        let r = cw_l2(&m, &x, &[0], &cfg).unwrap();
        assert!(!r.success[0]);
        assert_eq!(r.adv, x);
    }

    #[test]
    fn linear_boundary_distance_is_near_optimal() {
        let mut w = Array2::zeros((2, 4));
        w[[1, 0]] = 2.0;
        let m = Affine { w, b: vec![0.0, -1.0] };
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![0.3, 0.5, 0.5, 0.5]).unwrap();
        let cfg = CwConfig {
            steps: 300,
            lr: 0.01,
            binary_search_steps: 6,
            initial_const: 1.0,
            ..CwConfig::default()
        };
        let r = cw_l2(&m, &x, &[0], &cfg).unwrap();
        assert!(r.success[0]);
        assert!(r.l2[0] >= 0.2 - 1e-9 && r.l2[0] < 0.23, "{}", r.l2[0]);
        assert_ne!(m.predict(&r.adv)[0], 0);
    }
}
