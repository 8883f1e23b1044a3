use std::fmt::Write as _;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::attacks::{ce_objective, cw_l2, deepfool, fgsm, pgd, pgd_from, project, slide, Attack, AttackSpec, CwConfig, NamedAttack, Norm};
use crate::dataio::{Images, LabeledImageSet};
use crate::error::{arg_err, Result};
use crate::model::{argmax_rows, LogitModel, Network};
use crate::seed::substream;

const ATTACK_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub name: String,
    pub norm: Norm,
    pub epsilon: f64,
    /// Percentage of points still classified correctly.
    pub accuracy: f64,
    /// Points whose attack raised a numeric error (counted as misclassified).
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    #[serde(default)]
    pub label: String,
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackResult>,
    pub fingerprint: String,
    pub seed: u64,
    pub num_examples: usize,
}

impl RobustnessReport {
    pub fn accuracy_of(&self, name: &str) -> Option<f64> {
        self.attacks.iter().find(|a| a.name == name).map(|a| a.accuracy)
    }

    /// Clean accuracy followed by every attack accuracy, in report order.
    pub fn scores(&self) -> Vec<f64> {
        std::iter::once(self.clean_accuracy).chain(self.attacks.iter().map(|a| a.accuracy)).collect()
    }

    /// Aligned plain-text table, one row per attack.
    pub fn to_table(&self) -> String {
        let mut rows = vec![("Clean".to_string(), "-".to_string(), "-".to_string(), self.clean_accuracy)];
        for a in &self.attacks {
            rows.push((a.name.clone(), a.norm.to_string(), format!("{:.4}", a.epsilon), a.accuracy));
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        if !self.label.is_empty() {
            let _ = writeln!(s, "{}", self.label);
        }
        let _ = writeln!(s, "{:<w$}  {:>5}  {:>8}  {:>8}", "Attack", "Norm", "Eps", "Acc (%)");
        let _ = writeln!(s, "{}", "-".repeat(w + 27));
        for (n, norm, eps, acc) in rows {
            let _ = writeln!(s, "{n:<w$}  {norm:>5}  {eps:>8}  {acc:>8.2}");
        }
        let _ = writeln!(s, "n = {}, seed = {}, model {}", self.num_examples, self.seed, self.fingerprint);
        s
    }
}

/// FNV-1a over every parameter and buffer value of `nets`.
pub fn fingerprint(nets: &[&Network]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for n in nets {
        for p in &n.params {
            p.value.iter().for_each(|&v| eat(v));
        }
        for b in &n.buffers {
            b.value.iter().for_each(|&v| eat(v));
        }
    }
    format!("{h:016x}")
}

fn correct(model: &(impl LogitModel + ?Sized), x: &Images, y: &[usize]) -> Vec<bool> {
    let z = model.logits(x);
    let pred = argmax_rows(&z);
    pred.iter()
        .zip(y)
        .zip(z.axis_iter(Axis(0)))
        .map(|((p, t), row)| p == t && row.iter().all(|v| v.is_finite()))
        .collect()
}

/// Adversarial version of `x` for one attack, returned already inside the
/// attack's ε-ball.
pub fn run_attack<M: LogitModel + ?Sized>(model: &M, attack: &Attack, x: &Images, y: &[usize], rng: &mut crate::seed::SeededRng) -> Result<Images> {
    let mut obj = ce_objective(model, y);
    match attack {
        Attack::Pgd { spec } => pgd(&mut obj, x, spec, rng),
        Attack::Fgsm { epsilon } => fgsm(&mut obj, x, *epsilon),
        Attack::Slide { spec, quantile } => slide(&mut obj, x, spec, *quantile, rng),
        Attack::DeepFool { norm, epsilon, steps, overshoot } => {
            let mut adv = deepfool(model, x, y, *norm, *steps, *overshoot)?.adv;
            project(&mut adv, x, *norm, *epsilon);
            Ok(adv)
        }
        Attack::CarliniWagner {
            epsilon,
            steps,
            lr,
            confidence,
            binary_search_steps,
            initial_const,
        } => {
            let cfg = CwConfig {
                steps: *steps,
                lr: *lr,
                confidence: *confidence,
                binary_search_steps: *binary_search_steps,
                initial_const: *initial_const,
            };
            let mut adv = cw_l2(model, x, y, &cfg)?.adv;
            project(&mut adv, x, Norm::L2, *epsilon);
            Ok(adv)
        }
    }
}

fn batches(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n.div_ceil(ATTACK_BATCH)).map(move |b| (b * ATTACK_BATCH..((b + 1) * ATTACK_BATCH).min(n)).collect())
}

/// Count of points surviving `attack`, plus the number of attack failures.
fn surviving<M: LogitModel + ?Sized>(model: &M, data: &LabeledImageSet, attack: &NamedAttack, seed: u64) -> (usize, usize) {
    let mut rng = substream(seed, &format!("eval/{}", attack.name));
    let (mut ok, mut failed) = (0, 0);
    for idx in batches(data.len()) {
        let (x, y) = data.gather(&idx);
        match run_attack(model, &attack.attack, &x, &y, &mut rng) {
            Ok(adv) => ok += correct(model, &adv, &y).iter().filter(|&&c| c).count(),
            Err(_) => {
                for i in 0..idx.len() {
                    let xi = x.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned();
                    match run_attack(model, &attack.attack, &xi, &y[i..i + 1], &mut rng) {
                        Ok(adv) => ok += correct(model, &adv, &y[i..i + 1])[0] as usize,
                        Err(e) => {
                            failed += 1;
                            eprintln!("attack {} failed on point {}: {e}", attack.name, idx[i]);
                        }
                    }
                }
            }
        }
    }
    (ok, failed)
}

/// Clean accuracy and accuracy under each attack, all on the same inputs.
pub fn robust_accuracy<M: LogitModel + ?Sized>(model: &M, fingerprint: String, data: &LabeledImageSet, attacks: &[NamedAttack], seed: u64) -> Result<RobustnessReport> {
    if data.is_empty() {
        return arg_err("empty evaluation set");
    }
    let n = data.len();
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    let mut clean = 0;
    for idx in batches(n) {
        let (x, y) = data.gather(&idx);
        clean += correct(model, &x, &y).iter().filter(|&&c| c).count();
    }
    let mut results = Vec::with_capacity(attacks.len());
    for a in attacks {
        let (ok, failures) = surviving(model, data, a, seed);
        results.push(AttackResult {
            name: a.name.clone(),
            norm: a.attack.norm(),
            epsilon: a.attack.epsilon(),
            accuracy: pct(ok),
            failures,
        });
    }
    Ok(RobustnessReport {
        label: String::new(),
        clean_accuracy: pct(clean),
        attacks: results,
        fingerprint,
        seed,
        num_examples: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsCurve {
    #[serde(default)]
    pub label: String,
    pub norm: Norm,
    /// `(ε, accuracy %)` in ascending ε.
    pub points: Vec<(f64, f64)>,
}

/// Accuracy as a function of ε. Each budget warm-starts PGD from the
/// previous budget's adversarial example, and a point counts as broken once
/// any budget up to ε broke it, so the curve never increases.
pub fn epsilon_sweep<M: LogitModel + ?Sized>(
    model: &M,
    data: &LabeledImageSet,
    eps_list: &[f64],
    template: &AttackSpec,
    seed: u64,
) -> Result<EpsCurve> {
    if eps_list.windows(2).any(|w| w[1] < w[0]) {
        return arg_err("eps_list must be sorted ascending");
    }
    if eps_list.iter().any(|&e| !(e >= 0.0)) {
        return arg_err("budgets must be >= 0");
    }
    if data.is_empty() {
        return arg_err("empty evaluation set");
    }
    let n = data.len();
    let mut broken = vec![false; n];
    let mut starts: Vec<Option<Images>> = vec![None; n.div_ceil(ATTACK_BATCH)];
    let mut points = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let spec = AttackSpec { epsilon: eps, ..*template };
        for (b, idx) in batches(n).enumerate() {
            let (x, y) = data.gather(&idx);
            let mut obj = ce_objective(model, &y);
            let adv = match &starts[b] {
                Some(s) => pgd_from(&mut obj, &x, s, &spec)?,
                None => pgd(&mut obj, &x, &spec, &mut substream(seed, "eps-sweep"))?,
            };
            for (i, c) in correct(model, &adv, &y).into_iter().enumerate() {
                broken[idx[i]] |= !c;
            }
            starts[b] = Some(adv);
        }
        let ok = broken.iter().filter(|&&b| !b).count();
        points.push((eps, 100.0 * ok as f64 / n as f64));
    }
    Ok(EpsCurve {
        label: String::new(),
        norm: template.norm,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::table_defaults;
    use ndarray::{Array2, Array4};
    use rand::Rng;

    struct Affine {
        w: Array2<f64>,
        b: Vec<f64>,
    }

    impl LogitModel for Affine {
        fn num_classes(&self) -> usize {
            self.w.nrows()
        }
        fn logits(&self, x: &Images) -> Array2<f64> {
            let n = x.shape()[0];
            let flat = x.as_standard_layout().into_owned().into_shape_with_order((n, self.w.ncols())).unwrap();
            let mut z = flat.dot(&self.w.t());
            for mut r in z.rows_mut() {
                r.iter_mut().zip(&self.b).for_each(|(v, b)| *v += b);
            }
            z
        }
        fn logits_and_vjp(&self, x: &Images, up: &dyn Fn(&Array2<f64>) -> Array2<f64>) -> (Array2<f64>, Images) {
            let z = self.logits(x);
            let g = up(&z).dot(&self.w).into_shape_with_order(x.raw_dim()).unwrap();
            (z, g)
        }
    }

    fn data(n: usize, seed: u64) -> LabeledImageSet {
        let mut rng = substream(seed, "t");
        let images = Array4::from_shape_fn((n, 1, 4, 4), |_| rng.random::<f64>());
        let labels = (0..n).map(|i| (i * 7 + 3) % 3 % 2).collect();
        LabeledImageSet::new(images, labels, 2).unwrap()
    }

    fn model(seed: u64) -> Affine {
        let mut rng = substream(seed, "w");
        Affine {
            w: Array2::from_shape_fn((2, 16), |_| rng.random_range(-1.0..1.0)),
            b: vec![0.0, 0.1],
        }
    }

    fn pgd_named(name: &str, spec: AttackSpec) -> NamedAttack {
        NamedAttack { name: name.into(), attack: Attack::Pgd { spec } }
    }

    #[test]
    fn empty_attack_list_reports_clean_only() {
        let r = robust_accuracy(&model(1), "f".into(), &data(40, 1), &[], 0).unwrap();
        assert!(r.attacks.is_empty());
        assert!((0.0..=100.0).contains(&r.clean_accuracy));
        assert_eq!(r.scores(), vec![r.clean_accuracy]);
    }

    #[test]
    fn zero_budget_pgd_equals_clean_accuracy() {
        let spec = AttackSpec { epsilon: 0.0, ..AttackSpec::pgd20() };
        let r = robust_accuracy(&model(2), "f".into(), &data(60, 2), &[pgd_named("zero", spec)], 0).unwrap();
        assert_eq!(r.attacks[0].accuracy, r.clean_accuracy);
    }

    #[test]
    fn constant_classifier_is_unaffected_by_every_attack() {
        let m = Affine { w: Array2::zeros((2, 16)), b: vec![1.0, 0.0] };
        let d = data(30, 3);
        let prevalence = 100.0 * d.labels.iter().filter(|&&l| l == 0).count() as f64 / d.len() as f64;
        let r = robust_accuracy(&m, "c".into(), &d, &table_defaults(), 0).unwrap();
        assert_eq!(r.clean_accuracy, prevalence);
        assert_eq!(r.attacks.len(), table_defaults().len());
        for a in &r.attacks {
            assert_eq!(a.accuracy, prevalence, "{}", a.name);
        }
    }

    #[test]
    fn more_pgd_steps_do_not_help_the_defender() {
        for seed in 0..4 {
            let m = model(10 + seed);
            let d = data(100, 10 + seed);
            let spec20 = AttackSpec { epsilon: 0.05, ..AttackSpec::pgd20() };
            let spec50 = AttackSpec { steps: 50, ..spec20 };
            let r = robust_accuracy(&m, "f".into(), &d, &[pgd_named("20", spec20), pgd_named("50", spec50)], seed).unwrap();
            assert!(r.attacks[1].accuracy <= r.attacks[0].accuracy + 2.0, "{:?}", r.attacks);
        }
    }

    #[test]
    fn non_finite_points_count_as_misclassified() {
        let m = Affine { w: Array2::from_elem((2, 16), f64::NAN), b: vec![0.0, 0.0] };
        let r = robust_accuracy(&m, "nan".into(), &data(10, 4), &[pgd_named("p", AttackSpec::pgd10())], 0).unwrap();
        assert_eq!(r.clean_accuracy, 0.0);
        assert_eq!(r.attacks[0].accuracy, 0.0);
        assert_eq!(r.attacks[0].failures, 10);
    }

    #[test]
    fn report_is_reproducible_for_fixed_seed() {
        let d = data(50, 5);
        let atk = &table_defaults()[..2];
        let a = robust_accuracy(&model(5), "f".into(), &d, atk, 9).unwrap();
        let b = robust_accuracy(&model(5), "f".into(), &d, atk, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.to_table().contains("PGD20-linf"));
    }

    #[test]
    fn sweep_starts_at_clean_accuracy_and_never_increases() {
        let m = model(6);
        let d = data(80, 6);
        let eps: Vec<f64> = (0..6).map(|i| i as f64 * 0.02).collect();
        let c = epsilon_sweep(&m, &d, &eps, &AttackSpec::pgd10(), 0).unwrap();
        let clean = robust_accuracy(&m, "f".into(), &d, &[], 0).unwrap().clean_accuracy;
        assert_eq!(c.points[0].1, clean);
        assert!(c.points.windows(2).all(|w| w[1].1 <= w[0].1));
        assert!(epsilon_sweep(&m, &d, &[0.1, 0.0], &AttackSpec::pgd10(), 0).is_err());
    }
}
