use ndarray::{Array2, Axis};

use crate::error::{arg_err, Result};

/// InfoNCE value and gradients with respect to the queries, the positive
/// keys and the temperature. Negatives are treated as constants.
#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_query: Array2<f64>,
    pub d_key: Array2<f64>,
    pub d_temperature: f64,
}

fn check(q: &Array2<f64>, k_pos: &Array2<f64>, negatives: &Array2<f64>, t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return arg_err(format!("temperature {t} must be > 0"));
    }
    if q.dim() != k_pos.dim() {
        return arg_err(format!("query shape {:?} != key shape {:?}", q.dim(), k_pos.dim()));
    }
    if q.nrows() == 0 {
        return arg_err("empty query batch");
    }
    if negatives.ncols() != q.ncols() {
        return arg_err(format!("negative dim {} != query dim {}", negatives.ncols(), q.ncols()));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax([q·k₊, q·N]/T)[0]`.
pub fn info_nce(q: &Array2<f64>, k_pos: &Array2<f64>, negatives: &Array2<f64>, temperature: f64) -> Result<f64> {
    Ok(info_nce_grad(q, k_pos, negatives, temperature)?.loss)
}

pub fn info_nce_grad(q: &Array2<f64>, k_pos: &Array2<f64>, negatives: &Array2<f64>, temperature: f64) -> Result<InfoNceGrad> {
    check(q, k_pos, negatives, temperature)?;
    let t = temperature;
    let b = q.nrows() as f64;
    let pos: Vec<f64> = q.axis_iter(Axis(0)).zip(k_pos.axis_iter(Axis(0))).map(|(a, k)| a.dot(&k) / t).collect();
    // b × K negative logits, turned into softmax weights in place
    let mut neg = q.dot(&negatives.t());
    neg.mapv_inplace(|v| v / t);
    let mut loss = 0.0;
    let mut d_t = 0.0;
    let mut p_pos = vec![0.0; pos.len()];
    for (i, mut row) in neg.axis_iter_mut(Axis(0)).enumerate() {
        let m = row.fold(pos[i], |a, &v| a.max(v));
        let e0 = (pos[i] - m).exp();
        let mut z = e0;
        let mut weighted = 0.0;
        for v in row.iter_mut() {
            let l = *v;
            *v = (l - m).exp();
            z += *v;
            weighted += *v * l;
        }
        loss += m + z.ln() - pos[i];
        row.mapv_inplace(|v| v / z);
        p_pos[i] = e0 / z;
        // ∂/∂T of (logsumexp(l) − l₀) with l = s/T: −(Σ p_j l_j − l₀)/T
        let mean_l = (e0 * pos[i] + weighted) / z;
        d_t -= (mean_l - pos[i]) / t;
    }
    let mut d_query = neg.dot(negatives);
    for (i, (mut row, k)) in d_query.axis_iter_mut(Axis(0)).zip(k_pos.axis_iter(Axis(0))).enumerate() {
        row.scaled_add(p_pos[i] - 1.0, &k);
        row.mapv_inplace(|v| v / (t * b));
    }
    let mut d_key = q.clone();
    for (i, mut row) in d_key.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| v * (p_pos[i] - 1.0) / (t * b));
    }
    Ok(InfoNceGrad {
        loss: loss / b,
        d_query,
        d_key,
        d_temperature: d_t / b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::from_seed;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn unit_rows(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = from_seed(seed);
        let mut a: Array2<f64> = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
        for mut r in a.rows_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        a
    }

    #[test]
    fn symmetric_single_negative_is_ln2() {
        let q: Array2<f64> = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let k = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        let n = Array2::from_shape_vec((1, 2), vec![0.6, -0.8]).unwrap();
        for t in [0.05, 0.2, 1.0, 7.0] {
            assert!((info_nce(&q, &k, &n, t).unwrap() - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_negatives_closed_form() {
        let d = 11;
        let mut q: Array2<f64> = Array2::zeros((1, d));
        q[[0, 0]] = 1.0;
        let mut n: Array2<f64> = Array2::zeros((10, d));
        for j in 0..10 {
            n[[j, j + 1]] = 1.0;
        }
        let l = info_nce(&q, &q, &n, 0.2).unwrap();
        let expect = (1.0 + 10.0 * (-5f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.065207).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_temperature() {
        let q = unit_rows(1, 2, 4);
        assert!(info_nce(&q, &q, &q, 0.0).is_err());
        assert!(info_nce(&q, &q, &q, -1.0).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let (q, k, n) = (unit_rows(1, 3, 5), unit_rows(2, 3, 5), unit_rows(3, 7, 5));
        let t = 0.3;
        let g = info_nce_grad(&q, &k, &n, t).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut qp = q.clone();
                qp[[i, j]] += h;
                let mut qm = q.clone();
                qm[[i, j]] -= h;
                let fd = (info_nce(&qp, &k, &n, t).unwrap() - info_nce(&qm, &k, &n, t).unwrap()) / (2.0 * h);
                assert!((fd - g.d_query[[i, j]]).abs() < 1e-7);
                let mut kp = k.clone();
                kp[[i, j]] += h;
                let mut km = k.clone();
                km[[i, j]] -= h;
                let fd = (info_nce(&q, &kp, &n, t).unwrap() - info_nce(&q, &km, &n, t).unwrap()) / (2.0 * h);
                assert!((fd - g.d_key[[i, j]]).abs() < 1e-7);
            }
        }
        let fd = (info_nce(&q, &k, &n, t + h).unwrap() - info_nce(&q, &k, &n, t - h).unwrap()) / (2.0 * h);
        assert!(((fd - g.d_temperature) / fd).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in 0u64..1000, shift in 1usize..9) {
            let (q, k, n) = (unit_rows(seed, 4, 6), unit_rows(seed + 1, 4, 6), unit_rows(seed + 2, 9, 6));
            let mut perm = n.clone();
            for j in 0..9 {
                perm.row_mut(j).assign(&n.row((j + shift) % 9));
            }
            let a = info_nce(&q, &k, &n, 0.2).unwrap();
            let b = info_nce(&q, &k, &perm, 0.2).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn duplicate_negative_increases_loss(seed in 0u64..1000, which in 0usize..5) {
            let (q, k, n) = (unit_rows(seed, 3, 4), unit_rows(seed + 1, 3, 4), unit_rows(seed + 2, 5, 4));
            let mut dup = Array2::zeros((6, 4));
            dup.slice_mut(ndarray::s![..5, ..]).assign(&n);
            dup.row_mut(5).assign(&n.row(which));
            prop_assert!(info_nce(&q, &k, &dup, 0.5).unwrap() > info_nce(&q, &k, &n, 0.5).unwrap());
        }
    }
}
