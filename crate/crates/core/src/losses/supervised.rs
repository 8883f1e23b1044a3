use ndarray::Array2;
use rand::Rng;

use super::LossWeights;
use crate::attacks::{ce_objective, pgd, AttackSpec};
use crate::dataio::Images;
use crate::error::{arg_err, Result};
use crate::model::{BnPass, Classifier, ClassifierGrads, LogitModel, PendingStats};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedLoss {
    pub total: f64,
    /// Clean cross-entropy.
    pub natural: f64,
    /// The robustness term: KL consistency for TRADES, adversarial
    /// cross-entropy for PGD-AT.
    pub robust: f64,
}

fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean cross-entropy and its logit gradient.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if labels.len() != n || n == 0 {
        return arg_err(format!("{} labels for {n} logit rows", labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return arg_err(format!("label {y} out of range for {c} classes"));
    }
    let lp = log_softmax_rows(logits);
    let mut g = lp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= lp[[i, y]];
        g[[i, y]] -= 1.0;
    }
    g.mapv_inplace(|v| v / n as f64);
    Ok((loss / n as f64, g))
}

/// Mean `KL(p_nat ‖ p_adv)` over rows, with gradients for both logit sets.
pub fn kl_consistency(z_nat: &Array2<f64>, z_adv: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let n = z_nat.nrows() as f64;
    let ln = log_softmax_rows(z_nat);
    let la = log_softmax_rows(z_adv);
    let pn = ln.mapv(f64::exp);
    let pa = la.mapv(f64::exp);
    let mut total = 0.0;
    let mut g_nat = Array2::zeros(z_nat.raw_dim());
    for i in 0..z_nat.nrows() {
        let kl: f64 = (0..z_nat.ncols()).map(|j| pn[[i, j]] * (ln[[i, j]] - la[[i, j]])).sum();
        total += kl;
        for j in 0..z_nat.ncols() {
            g_nat[[i, j]] = pn[[i, j]] * (ln[[i, j]] - la[[i, j]] - kl) / n;
        }
    }
    let g_adv = (&pa - &pn) / n;
    (total / n, g_nat, g_adv)
}

/// PGD on `Σ KL(p(x) ‖ p(x'))` with the natural distribution held fixed,
/// model in eval mode.
pub fn trades_perturb(model: &Classifier, x: &Images, spec: &AttackSpec, rng: &mut impl Rng) -> Result<Images> {
    let p_nat = log_softmax_rows(&model.logits(x)).mapv(f64::exp);
    let mut objective = |xa: &Images| {
        let value = std::cell::Cell::new(0.0);
        let (_, g) = model.logits_and_vjp(xa, &|z| {
            let la = log_softmax_rows(z);
            let mut v = 0.0;
            for (a, p) in la.iter().zip(p_nat.iter()) {
                if *p > 0.0 {
                    v += p * (p.ln() - a);
                }
            }
            value.set(v);
            la.mapv(f64::exp) - &p_nat
        });
        Ok((value.get(), g))
    };
    pgd(&mut objective, x, spec, rng)
}

type Step = (SupervisedLoss, ClassifierGrads, Vec<PendingStats>);

fn trades_core(model: &Classifier, x: &Images, y: &[usize], beta: f64, spec: &AttackSpec, pass: BnPass, rng: &mut impl Rng) -> Result<Step> {
    if !(beta > 0.0) {
        return arg_err(format!("trades_beta {beta} must be > 0"));
    }
    let adv = trades_perturb(model, x, spec, rng)?;
    let (zn, tn, sn) = model.run(x, pass, true)?;
    let (za, ta, sa) = model.run(&adv, pass, true)?;
    let (ce, g_ce) = cross_entropy(&zn, y)?;
    let (kl, g_kn, g_ka) = kl_consistency(&zn, &za);
    let mut grads = ClassifierGrads::zeros_like(model);
    model.backward(&tn.unwrap(), &(g_ce + g_kn * beta), Some(&mut grads), false);
    model.backward(&ta.unwrap(), &(g_ka * beta), Some(&mut grads), false);
    let loss = SupervisedLoss {
        total: ce + beta * kl,
        natural: ce,
        robust: kl,
    };
    Ok((loss, grads, vec![sn, sa]))
}

/// `CE(x, y) + β·KL(p(x) ‖ p(x+δ*))` with batch statistics.
pub fn trades_loss(model: &Classifier, x: &Images, y: &[usize], weights: &LossWeights, spec: &AttackSpec, rng: &mut impl Rng) -> Result<SupervisedLoss> {
    Ok(trades_loss_and_grad(model, x, y, weights, spec, rng)?.0)
}

pub fn trades_loss_and_grad(
    model: &Classifier,
    x: &Images,
    y: &[usize],
    weights: &LossWeights,
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<(SupervisedLoss, ClassifierGrads)> {
    let (l, g, _) = trades_core(model, x, y, weights.trades_beta, spec, BnPass::TrainNoStats, rng)?;
    Ok((l, g))
}

pub(crate) fn trades_step(model: &mut Classifier, x: &Images, y: &[usize], beta: f64, spec: &AttackSpec, rng: &mut impl Rng) -> Result<(SupervisedLoss, ClassifierGrads)> {
    let (l, g, stats) = trades_core(model, x, y, beta, spec, BnPass::Train, rng)?;
    for s in stats {
        model.apply_pending(s);
    }
    Ok((l, g))
}

fn pgd_at_core(model: &Classifier, x: &Images, y: &[usize], spec: &AttackSpec, pass: BnPass, rng: &mut impl Rng) -> Result<Step> {
    let adv = pgd(&mut ce_objective(model, y), x, spec, rng)?;
    let (za, ta, sa) = model.run(&adv, pass, true)?;
    let (ce, g) = cross_entropy(&za, y)?;
    let mut grads = ClassifierGrads::zeros_like(model);
    model.backward(&ta.unwrap(), &g, Some(&mut grads), false);
    let loss = SupervisedLoss {
        total: ce,
        natural: ce,
        robust: ce,
    };
    Ok((loss, grads, vec![sa]))
}

/// Cross-entropy at the PGD-maximized input, with batch statistics.
pub fn pgd_at_loss(model: &Classifier, x: &Images, y: &[usize], spec: &AttackSpec, rng: &mut impl Rng) -> Result<f64> {
    Ok(pgd_at_core(model, x, y, spec, BnPass::TrainNoStats, rng)?.0.total)
}

pub fn pgd_at_loss_and_grad(model: &Classifier, x: &Images, y: &[usize], spec: &AttackSpec, rng: &mut impl Rng) -> Result<(f64, ClassifierGrads)> {
    let (l, g, _) = pgd_at_core(model, x, y, spec, BnPass::TrainNoStats, rng)?;
    Ok((l.total, g))
}

pub(crate) fn pgd_at_step(model: &mut Classifier, x: &Images, y: &[usize], spec: &AttackSpec, rng: &mut impl Rng) -> Result<(SupervisedLoss, ClassifierGrads)> {
    let (l, g, stats) = pgd_at_core(model, x, y, spec, BnPass::Train, rng)?;
    for s in stats {
        model.apply_pending(s);
    }
    Ok((l, g))
}

pub(crate) fn standard_step(model: &mut Classifier, x: &Images, y: &[usize]) -> Result<(SupervisedLoss, ClassifierGrads)> {
    let (z, tape) = model.forward_train(x)?;
    let (ce, g) = cross_entropy(&z, y)?;
    let mut grads = ClassifierGrads::zeros_like(model);
    model.backward(&tape, &g, Some(&mut grads), false);
    let loss = SupervisedLoss {
        total: ce,
        natural: ce,
        robust: 0.0,
    };
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, BnMode, DualBnEncoder};
    use crate::seed::from_seed;
    use ndarray::Array4;

    fn setup(seed: u64) -> (Classifier, Images, Vec<usize>) {
        let mut rng = from_seed(seed);
        let enc = DualBnEncoder::new(&ArchConfig::tiny(), &mut rng).unwrap();
        let clf = Classifier::from_encoder(&enc, 3, BnMode::Adv, &mut rng);
        let x = Array4::from_shape_fn((5, 3, 8, 8), |_| rng.random_range(0.1..0.9));
        let y = (0..5).map(|i| i % 3).collect();
        (clf, x, y)
    }

    fn natural_ce(model: &Classifier, x: &Images, y: &[usize]) -> f64 {
        let (z, _, _) = model.run(x, BnPass::TrainNoStats, false).unwrap();
        cross_entropy(&z, y).unwrap().0
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = Array2::zeros((2, 4));
        let (l, g) = cross_entropy(&z, &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((g[[0, 0]] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!(cross_entropy(&z, &[0, 4]).is_err());
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_inputs() {
        let mut rng = from_seed(1);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
            let b = Array2::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
            assert!(kl_consistency(&a, &b).0 >= 0.0);
            assert_eq!(kl_consistency(&a, &a).0, 0.0);
        }
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = from_seed(2);
        let a = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
        let (_, gn, ga) = kl_consistency(&a, &b);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut ap = a.clone();
                ap[[i, j]] += h;
                let mut am = a.clone();
                am[[i, j]] -= h;
                let fd = (kl_consistency(&ap, &b).0 - kl_consistency(&am, &b).0) / (2.0 * h);
                assert!((fd - gn[[i, j]]).abs() < 1e-8);
                let mut bp = b.clone();
                bp[[i, j]] += h;
                let mut bm = b.clone();
                bm[[i, j]] -= h;
                let fd = (kl_consistency(&a, &bp).0 - kl_consistency(&a, &bm).0) / (2.0 * h);
                assert!((fd - ga[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_budget_reduces_to_cross_entropy() {
        let (clf, x, y) = setup(3);
        let spec = AttackSpec { epsilon: 0.0, ..AttackSpec::pgd10() };
        let ce = natural_ce(&clf, &x, &y);
        let t = trades_loss(&clf, &x, &y, &LossWeights::default(), &spec, &mut from_seed(0)).unwrap();
        assert_eq!(t.total, ce);
        assert_eq!(t.robust, 0.0);
        assert_eq!(pgd_at_loss(&clf, &x, &y, &spec, &mut from_seed(0)).unwrap(), ce);
    }

    #[test]
    fn pgd_at_ascends_over_clean_loss() {
        let mut wins = 0;
        for seed in 0..5 {
            let (clf, x, y) = setup(10 + seed);
            let ce = natural_ce(&clf, &x, &y);
            let adv = pgd_at_loss(&clf, &x, &y, &AttackSpec::pgd10(), &mut from_seed(seed)).unwrap();
            wins += (adv >= ce) as usize;
        }
        assert!(wins >= 3);
    }
}
