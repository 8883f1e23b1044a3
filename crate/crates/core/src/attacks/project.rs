//! Per-sample projections onto norm balls and the pixel box.

use super::{sample_len, Norm};
use crate::dataio::Images;

pub fn project_linf(delta: &mut [f64], eps: f64) {
    delta.iter_mut().for_each(|d| *d = d.clamp(-eps, eps));
}

pub fn project_l2(delta: &mut [f64], eps: f64) {
    let n = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    if n > eps {
        let s = eps / n;
        delta.iter_mut().for_each(|d| *d *= s);
    }
}

/// Euclidean projection onto the ℓ1 ball via the sorted-threshold rule for
/// the simplex.
pub fn project_l1(delta: &mut [f64], eps: f64) {
    let total: f64 = delta.iter().map(|d| d.abs()).sum();
    if total <= eps {
        return;
    }
    if eps <= 0.0 {
        delta.iter_mut().for_each(|d| *d = 0.0);
        return;
    }
    let mut mags: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cum += u;
        let t = (cum - eps) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    delta.iter_mut().for_each(|d| *d = d.signum() * (d.abs() - theta).max(0.0));
}

/// Projects every sample's perturbation `x_adv - x` onto the ε-ball, then
/// clips `x_adv` into [0,1]. Clipping only shrinks |δ_i| because x ∈ [0,1],
/// so ball membership survives.
pub fn project(x_adv: &mut Images, x: &Images, norm: Norm, eps: f64) {
    let per = sample_len(x);
    let xs = x.as_slice().expect("contiguous");
    let xa = x_adv.as_slice_mut().expect("contiguous");
    let mut delta = vec![0.0; per];
    for (a, o) in xa.chunks_exact_mut(per).zip(xs.chunks_exact(per)) {
        for ((d, &av), &ov) in delta.iter_mut().zip(a.iter()).zip(o) {
            *d = av - ov;
        }
        match norm {
            Norm::Linf => project_linf(&mut delta, eps),
            Norm::L2 => project_l2(&mut delta, eps),
            Norm::L1 => project_l1(&mut delta, eps),
        }
        for ((av, &ov), &d) in a.iter_mut().zip(o).zip(&delta) {
            *av = (ov + d).clamp(0.0, 1.0);
        }
    }
}

pub fn clip_unit(x: &mut Images) {
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

pub(crate) fn norm_of(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => v.iter().fold(0.0f64, |m, d| m.max(d.abs())),
        Norm::L2 => v.iter().map(|d| d * d).sum::<f64>().sqrt(),
        Norm::L1 => v.iter().map(|d| d.abs()).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent oracle: bisection on the soft-threshold θ with Σ max(|v|-θ, 0) = ε.
    fn l1_bisection(v: &[f64], eps: f64) -> Vec<f64> {
        if v.iter().map(|x| x.abs()).sum::<f64>() <= eps {
            return v.to_vec();
        }
        let (mut lo, mut hi) = (0.0, v.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = v.iter().map(|x| (x.abs() - mid).max(0.0)).sum();
            if s > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let th = 0.5 * (lo + hi);
        v.iter().map(|x| x.signum() * (x.abs() - th).max(0.0)).collect()
    }

    #[test]
    fn l1_projection_matches_bisection_oracle() {
        let mut rng = from_seed(17);
        for _ in 0..200 {
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let eps = rng.random_range(0.1..6.0);
            let mut p = v.clone();
            project_l1(&mut p, eps);
            let o = l1_bisection(&v, eps);
            for (a, b) in p.iter().zip(&o) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn inside_ball_is_fixed_point() {
        let mut v = vec![0.5, -0.25, 0.1];
        project_l1(&mut v, 1.0);
        assert_eq!(v, vec![0.5, -0.25, 0.1]);
    }

    proptest! {
        #[test]
        fn projections_idempotent(v in proptest::collection::vec(-3.0f64..3.0, 1..40), eps in 0.01f64..5.0) {
            for f in [project_linf as fn(&mut [f64], f64), project_l2, project_l1] {
                let mut a = v.clone();
                f(&mut a, eps);
                let mut b = a.clone();
                f(&mut b, eps);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
                }
            }
            let mut a = v.clone();
            project_l1(&mut a, eps);
            prop_assert!(norm_of(&a, Norm::L1) <= eps * (1.0 + 1e-12));
            let mut a = v.clone();
            project_l2(&mut a, eps);
            prop_assert!(norm_of(&a, Norm::L2) <= eps * (1.0 + 1e-12));
        }
    }
}
