use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use super::project::{norm_of, project};
use super::{sample_len, AttackSpec, InputObjective, Norm};
use crate::dataio::Images;
use crate::error::{arg_err, AmocError, Result};
use crate::model::LogitModel;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform start in the ε-ball (ℓ∞), or a uniform direction scaled by a
/// uniform radius (ℓ2, ℓ1); clipped to [0,1].
pub fn random_start(x: &Images, norm: Norm, eps: f64, rng: &mut impl Rng) -> Images {
    let per = sample_len(x);
    let mut out = x.clone();
    let xs = out.as_slice_mut().expect("contiguous");
    for sample in xs.chunks_exact_mut(per) {
        let delta: Vec<f64> = match norm {
            Norm::Linf => (0..per).map(|_| rng.random_range(-1.0..=1.0) * eps).collect(),
            Norm::L2 | Norm::L1 => {
                let mut dir: Vec<f64> = if norm == Norm::L2 {
                    (0..per).map(|_| StandardNormal.sample(rng)).collect()
                } else {
                    (0..per)
                        .map(|_| {
                            let m: f64 = Exp1.sample(rng);
                            if rng.random::<bool>() {
                                m
                            } else {
                                -m
                            }
                        })
                        .collect()
                };
                let n = norm_of(&dir, norm).max(1e-300);
                let r = rng.random::<f64>() * eps;
                dir.iter_mut().for_each(|d| *d *= r / n);
                dir
            }
        };
        for (p, d) in sample.iter_mut().zip(delta) {
            *p = (*p + d).clamp(0.0, 1.0);
        }
    }
    out
}

/// Steepest-ascent direction for one sample under `norm`: sign for ℓ∞,
/// unit-ℓ2 gradient for ℓ2, unit-ℓ1 gradient for ℓ1. Zero gradients give a
/// zero direction.
pub fn pgd_step_direction(grad: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => grad.iter().map(|&g| sign(g)).collect(),
        Norm::L2 | Norm::L1 => {
            let n = norm_of(grad, norm);
            if n > 0.0 {
                grad.iter().map(|g| g / n).collect()
            } else {
                vec![0.0; grad.len()]
            }
        }
    }
}

/// SLIDE direction: sign of the gradient on coordinates whose |grad| is at
/// or above the `quantile` of |grad|, normalized to unit ℓ1. Coordinates
/// saturated at the pixel box in the ascent direction are excluded.
pub fn slide_direction(grad: &[f64], x: &[f64], quantile: f64) -> Vec<f64> {
    let masked: Vec<f64> = grad
        .iter()
        .zip(x)
        .map(|(&g, &p)| if (p >= 1.0 && g > 0.0) || (p <= 0.0 && g < 0.0) { 0.0 } else { g })
        .collect();
    let mut mags: Vec<f64> = masked.iter().map(|g| g.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let len = mags.len();
    let top = (((1.0 - quantile) * len as f64 - 1e-9).ceil() as usize).clamp(1, len);
    let thresh = mags[len - top];
    if thresh <= 0.0 {
        return vec![0.0; grad.len()];
    }
    let mut e: Vec<f64> = masked.iter().map(|&g| if g.abs() >= thresh { sign(g) } else { 0.0 }).collect();
    let n: f64 = e.iter().map(|v| v.abs()).sum();
    e.iter_mut().for_each(|v| *v /= n);
    e
}

fn iterate(
    objective: &mut impl InputObjective,
    x: &Images,
    spec: &AttackSpec,
    rng: &mut impl Rng,
    direction: &dyn Fn(&[f64], &[f64]) -> Vec<f64>,
) -> Result<Images> {
    spec.validate()?;
    let adv = if spec.random_start && spec.epsilon > 0.0 {
        random_start(x, spec.norm, spec.epsilon, rng)
    } else {
        x.clone()
    };
    ascend(objective, x, adv, spec, direction)
}

fn ascend(
    objective: &mut impl InputObjective,
    x: &Images,
    mut adv: Images,
    spec: &AttackSpec,
    direction: &dyn Fn(&[f64], &[f64]) -> Vec<f64>,
) -> Result<Images> {
    let eps = spec.epsilon;
    let alpha = spec.step_size();
    let per = sample_len(x);
    for _ in 0..spec.steps {
        let (value, grad) = objective.value_and_grad(&adv)?;
        if !value.is_finite() {
            return Err(AmocError::Numeric(format!("attack objective is {value}")));
        }
        let gs = grad.as_standard_layout();
        let gs = gs.as_slice().unwrap();
        let a = adv.as_slice_mut().unwrap();
        for (sample, g) in a.chunks_exact_mut(per).zip(gs.chunks_exact(per)) {
            let d = direction(g, sample);
            for (p, dv) in sample.iter_mut().zip(d) {
                *p += alpha * dv;
            }
        }
        project(&mut adv, x, spec.norm, eps);
    }
    Ok(adv)
}

/// Projected gradient ascent on `objective` inside the `spec` ball around `x`.
pub fn pgd(objective: &mut impl InputObjective, x: &Images, spec: &AttackSpec, rng: &mut impl Rng) -> Result<Images> {
    let norm = spec.norm;
    iterate(objective, x, spec, rng, &|g, _| pgd_step_direction(g, norm))
}

/// PGD started from `start` (projected into the ball first) instead of a
/// random or clean start.
pub fn pgd_from(objective: &mut impl InputObjective, x: &Images, start: &Images, spec: &AttackSpec) -> Result<Images> {
    spec.validate()?;
    if start.shape() != x.shape() {
        return arg_err("start shape differs from input shape");
    }
    let mut adv = start.clone();
    project(&mut adv, x, spec.norm, spec.epsilon);
    let norm = spec.norm;
    ascend(objective, x, adv, spec, &|g, _| pgd_step_direction(g, norm))
}

/// Sparse ℓ1 descent.
pub fn slide(objective: &mut impl InputObjective, x: &Images, spec: &AttackSpec, quantile: f64, rng: &mut impl Rng) -> Result<Images> {
    if spec.norm != Norm::L1 {
        return arg_err(format!("SLIDE needs the l1 norm, got {}", spec.norm));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return arg_err(format!("quantile {quantile} outside [0,1]"));
    }
    iterate(objective, x, spec, rng, &|g, p| slide_direction(g, p, quantile))
}

/// One full-budget signed-gradient step, clipped to [0,1].
pub fn fgsm(objective: &mut impl InputObjective, x: &Images, epsilon: f64) -> Result<Images> {
    if !(epsilon >= 0.0) {
        return arg_err(format!("epsilon {epsilon} must be >= 0"));
    }
    let (_, grad) = objective.value_and_grad(x)?;
    let mut adv = x.clone();
    adv.zip_mut_with(&grad, |p, &g| *p = (*p + epsilon * sign(g)).clamp(0.0, 1.0));
    Ok(adv)
}

pub(crate) fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Summed cross-entropy of `model` against `labels`, as an attack objective.
pub fn ce_objective<'a, M: LogitModel + ?Sized>(
    model: &'a M,
    labels: &'a [usize],
) -> impl FnMut(&Images) -> Result<(f64, Images)> + 'a {
    move |x: &Images| {
        let loss = std::cell::Cell::new(0.0);
        let (_, g) = model.logits_and_vjp(x, &|z| {
            let p = softmax_rows(z);
            let mut total = 0.0;
            let mut g = p.clone();
            for (i, &y) in labels.iter().enumerate() {
                let v = p[[i, y]];
                total -= if v.is_nan() { v } else { v.max(1e-300).ln() };
                g[[i, y]] -= 1.0;
            }
            loss.set(total);
            g
        });
        Ok((loss.get(), g))
    }
}
