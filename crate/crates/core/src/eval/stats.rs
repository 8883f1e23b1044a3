use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
    /// Set when the differences have zero spread and the convention fired.
    pub degenerate: Option<String>,
}

/// Two-sided paired t-test on `a[i] − b[i]` with `n − 1` degrees of freedom.
/// Zero-spread differences give `p = 1` when all are zero and `p = 0`
/// (with infinite t) otherwise.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return arg_err(format!("paired samples differ in length: {} vs {}", a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return arg_err("paired t-test needs at least two pairs");
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        let (t, p, why) = if mean == 0.0 {
            (0.0, 1.0, "all differences are zero")
        } else {
            (mean.signum() * f64::INFINITY, 0.0, "constant nonzero differences")
        };
        eprintln!("paired_ttest: {why}; p = {p} by convention");
        return Ok(TTest {
            t,
            p,
            n,
            degenerate: Some(why.into()),
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof >= 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, n, degenerate: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_give_p_one() {
        let r = paired_ttest(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.p, 1.0);
        assert!(r.degenerate.is_some());
    }

    #[test]
    fn constant_shift_gives_p_zero() {
        let r = paired_ttest(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.p, 0.0);
        assert_eq!(r.t, f64::NEG_INFINITY);
    }

    #[test]
    fn hand_computed_case_and_symmetry() {
        let (a, b) = ([1.0, 2.0, 3.0], [3.0, 1.0, 4.0]);
        let r = paired_ttest(&a, &b).unwrap();
        // d = [-2, 1, -1], mean -2/3, sd sqrt(7/3)
        let t = (-2.0 / 3.0) / ((7.0f64 / 3.0).sqrt() / 3f64.sqrt());
        assert!((r.t - t).abs() < 1e-12);
        // dof 2: P(|T| > |t|) = 1 - |t| / sqrt(2 + t²)
        let p = 1.0 - t.abs() / (2.0 + t * t).sqrt();
        assert!((r.p - p).abs() < 1e-10);
        let s = paired_ttest(&b, &a).unwrap();
        assert_eq!(s.p, r.p);
        assert_eq!(s.t, -r.t);
    }

    #[test]
    fn input_validation() {
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[2.0]).is_err());
    }
}
