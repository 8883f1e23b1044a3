use ndarray::Array2;
use rand::Rng;

use super::{pgd, AttackSpec, Norm};
use crate::bank::Banks;
use crate::dataio::Images;
use crate::error::{arg_err, Result};
use crate::losses::info_nce_grad;
use crate::model::{BnMode, BnPass, DualBnEncoder, EncoderPair};

/// Perturbation of `view_q` that maximizes the InfoNCE of the perturbed
/// query (BN_adv, eval statistics) against the clean key of `view_k` and
/// the current adversarial bank. Returns δ with `view_q + δ` in [0,1].
pub fn contrastive_perturb(
    pair: &EncoderPair,
    banks: &Banks,
    view_q: &Images,
    view_k: &Images,
    spec: &AttackSpec,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Images> {
    let (k_pos, _) = pair.key.forward(view_k, BnMode::Clean, BnPass::TrainNoStats, false)?;
    craft_delta(&pair.query, &k_pos, &banks.adv.negatives(), view_q, spec, temperature, rng)
}

pub(crate) fn craft_delta(
    query: &DualBnEncoder,
    k_pos: &Array2<f64>,
    negatives: &Array2<f64>,
    view_q: &Images,
    spec: &AttackSpec,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Images> {
    if spec.norm != Norm::Linf {
        return arg_err(format!("contrastive attack needs the linf norm, got {}", spec.norm));
    }
    let mut objective = |x: &Images| {
        let (z, tape) = query.forward(x, BnMode::Adv, BnPass::Eval, true)?;
        let g = info_nce_grad(&z, k_pos, negatives, temperature)?;
        let b = z.nrows() as f64;
        let gx = query.backward(&tape.unwrap(), &(g.d_query * b), None, true).unwrap();
        Ok((g.loss * b, gx))
    };
    let adv = pgd(&mut objective, view_q, spec, rng)?;
    Ok(adv - view_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::variant_loss;
    use crate::losses::VariantTag;
    use crate::model::{init_encoder_pair, ArchConfig};
    use crate::seed::from_seed;
    use ndarray::Array4;

    fn setup(seed: u64) -> (EncoderPair, Banks, Images, Images) {
        let pair = init_encoder_pair(&ArchConfig::tiny(), seed, 0.99).unwrap();
        let banks = Banks::new(64, pair.query.embed_dim(), seed + 1).unwrap();
        let mut rng = from_seed(seed + 2);
        let vq = Array4::from_shape_fn((4, 3, 8, 8), |_| rng.random_range(0.0..1.0));
        let vk = Array4::from_shape_fn((4, 3, 8, 8), |_| rng.random_range(0.0..1.0));
        (pair, banks, vq, vk)
    }

    fn eval_loss(pair: &EncoderPair, banks: &Banks, x: &Images, vk: &Images) -> f64 {
        let (k, _) = pair.key.forward(vk, BnMode::Clean, BnPass::TrainNoStats, false).unwrap();
        let z = pair.query.embed(x, BnMode::Adv).unwrap();
        crate::losses::info_nce(&z, &k, &banks.adv.negatives(), 0.2).unwrap()
    }

    #[test]
    fn respects_budget_and_box() {
        let (pair, banks, vq, vk) = setup(1);
        let spec = AttackSpec::pretrain();
        let d = contrastive_perturb(&pair, &banks, &vq, &vk, &spec, 0.2, &mut from_seed(3)).unwrap();
        assert!(d.iter().all(|v| v.abs() <= spec.epsilon + 1e-12));
        assert!((&vq + &d).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_budget_gives_zero_delta() {
        let (pair, banks, vq, vk) = setup(2);
        let spec = AttackSpec { epsilon: 0.0, ..AttackSpec::pretrain() };
        let d = contrastive_perturb(&pair, &banks, &vq, &vk, &spec, 0.2, &mut from_seed(3)).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
        let with = variant_loss(VariantTag::ACA, &pair, &banks, &vq, &vk, Some(&d), 0.2).unwrap();
        let zero = Images::zeros(vq.raw_dim());
        let clean = variant_loss(VariantTag::ACA, &pair, &banks, &vq, &vk, Some(&zero), 0.2).unwrap();
        assert_eq!(with, clean);
    }

    #[test]
    fn ascends_on_random_encoders() {
        let mut wins = 0;
        let trials = 20;
        for seed in 0..trials {
            let (pair, banks, vq, vk) = setup(100 + seed);
            let d = contrastive_perturb(&pair, &banks, &vq, &vk, &AttackSpec::pretrain(), 0.2, &mut from_seed(seed)).unwrap();
            wins += (eval_loss(&pair, &banks, &(&vq + &d), &vk) >= eval_loss(&pair, &banks, &vq, &vk)) as u64;
        }
        assert!(wins * 2 > trials, "{wins}/{trials}");
    }

    #[test]
    fn rejects_non_linf() {
        let (pair, banks, vq, vk) = setup(4);
        let spec = AttackSpec { norm: Norm::L2, ..AttackSpec::pretrain() };
        assert!(contrastive_perturb(&pair, &banks, &vq, &vk, &spec, 0.2, &mut from_seed(0)).is_err());
    }
}
