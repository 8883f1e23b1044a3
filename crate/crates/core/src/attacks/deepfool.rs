use ndarray::{Array2, Axis};

use super::{sample_len, Norm};
use crate::dataio::Images;
use crate::error::{arg_err, AmocError, Result};
use crate::model::{argmax_rows, LogitModel};

#[derive(Debug, Clone)]
pub struct DeepFoolResult {
    pub adv: Images,
    /// Iterations spent per sample before its prediction flipped (or the cap).
    pub iterations: Vec<usize>,
    pub flipped: Vec<bool>,
}

/// Minimal linearized perturbation toward the nearest decision boundary,
/// under ℓ2 or ℓ∞. Samples already misclassified are left untouched.
/// The returned images are clipped to [0,1] but not projected to any budget.
pub fn deepfool<M: LogitModel + ?Sized>(
    model: &M,
    x: &Images,
    labels: &[usize],
    norm: Norm,
    steps: usize,
    overshoot: f64,
) -> Result<DeepFoolResult> {
    if norm == Norm::L1 {
        return arg_err("DeepFool supports l2 and linf only");
    }
    let n = x.shape()[0];
    if labels.len() != n {
        return arg_err(format!("{} labels for {n} images", labels.len()));
    }
    if !(overshoot >= 0.0) {
        return arg_err(format!("overshoot {overshoot} must be >= 0"));
    }
    let classes = model.num_classes();
    let per = sample_len(x);
    let mut r_total = Images::zeros(x.raw_dim());
    let mut adv = x.clone();
    let mut iterations = vec![0usize; n];
    let mut active: Vec<bool> = argmax_rows(&model.logits(x)).iter().zip(labels).map(|(p, y)| p == y).collect();

    for _ in 0..steps {
        if !active.iter().any(|&a| a) {
            break;
        }
        let z = model.logits(&adv);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(AmocError::Numeric("non-finite logits in DeepFool".into()));
        }
        let mut best = vec![(f64::INFINITY, None::<Vec<f64>>, 0.0f64); n];
        for k in 0..classes {
            let (_, g) = model.logits_and_vjp(&adv, &|z: &Array2<f64>| {
                let mut u = Array2::zeros(z.raw_dim());
                for (i, &y) in labels.iter().enumerate() {
                    if y != k {
                        u[[i, k]] += 1.0;
                        u[[i, y]] -= 1.0;
                    }
                }
                u
            });
            let g = g.as_standard_layout().into_owned();
            let gs = g.as_slice().unwrap();
            for i in 0..n {
                if !active[i] || labels[i] == k {
                    continue;
                }
                let w = &gs[i * per..(i + 1) * per];
                let f = z[[i, k]] - z[[i, labels[i]]];
                let wn = match norm {
                    Norm::L2 => w.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    _ => w.iter().map(|v| v.abs()).sum::<f64>(),
                };
                if wn == 0.0 {
                    continue;
                }
                let dist = f.abs() / wn;
                if dist < best[i].0 {
                    best[i] = (dist, Some(w.to_vec()), wn);
                }
            }
        }
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let (dist, w, wn) = &best[i];
            let Some(w) = w else {
                active[i] = false;
                continue;
            };
            iterations[i] += 1;
            let mut ri = r_total.index_axis_mut(Axis(0), i);
            for (r, &wv) in ri.iter_mut().zip(w.iter()) {
                *r += match norm {
                    Norm::L2 => dist * wv / wn,
                    _ => dist * wv.signum() * (wv != 0.0) as i32 as f64,
                };
            }
            let mut ai = adv.index_axis_mut(Axis(0), i);
            let xi = x.index_axis(Axis(0), i);
            ndarray::Zip::from(&mut ai)
                .and(&xi)
                .and(&ri)
                .for_each(|a, &xv, &r| *a = (xv + (1.0 + overshoot) * r).clamp(0.0, 1.0));
        }
        let pred = argmax_rows(&model.logits(&adv));
        for i in 0..n {
            if pred[i] != labels[i] {
                active[i] = false;
            }
        }
    }
    let pred = argmax_rows(&model.logits(&adv));
    let flipped = pred.iter().zip(labels).map(|(p, y)| p != y).collect();
    Ok(DeepFoolResult { adv, iterations, flipped })
}
