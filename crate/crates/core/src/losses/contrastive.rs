use ndarray::Array2;

use super::{info_nce, info_nce_grad, LossWeights, Side, VariantTag};
use crate::bank::Banks;
use crate::dataio::Images;
use crate::error::{arg_err, Result};
use crate::model::{BnMode, BnPass, DualBnEncoder, EncoderGrads, EncoderPair, EncoderTape};

/// Query embeddings (clean view with BN_clean, perturbed view with BN_adv)
/// and key embeddings (second clean view with BN_clean, perturbed view
/// with BN_adv). The perturbed entries are absent without a δ.
#[derive(Debug, Clone)]
pub struct Representations {
    pub q_clean: Array2<f64>,
    pub q_adv: Option<Array2<f64>>,
    pub k_clean: Array2<f64>,
    pub k_adv: Option<Array2<f64>>,
}

/// The combined objective and its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmocLoss {
    pub total: f64,
    pub ccc: f64,
    pub variant: f64,
}

#[derive(Debug, Default)]
pub(crate) struct QueryTapes {
    pub clean: Option<EncoderTape>,
    pub adv: Option<EncoderTape>,
}

pub(crate) fn perturbed(view_q: &Images, delta: &Images) -> Result<Images> {
    if view_q.shape() != delta.shape() {
        return arg_err(format!("delta shape {:?} != view shape {:?}", delta.shape(), view_q.shape()));
    }
    Ok(view_q + delta)
}

fn encode(pair: &EncoderPair, view_q: &Images, view_k: &Images, delta: Option<&Images>, keep_tape: bool) -> Result<(Representations, QueryTapes)> {
    if view_q.shape() != view_k.shape() {
        return arg_err("query and key views differ in shape");
    }
    let pass = BnPass::TrainNoStats;
    let (q_clean, tc) = pair.query.forward(view_q, BnMode::Clean, pass, keep_tape)?;
    let (k_clean, _) = pair.key.forward(view_k, BnMode::Clean, pass, false)?;
    let mut tapes = QueryTapes { clean: tc, adv: None };
    let (q_adv, k_adv) = match delta {
        Some(d) => {
            let xa = perturbed(view_q, d)?;
            let (qa, ta) = pair.query.forward(&xa, BnMode::Adv, pass, keep_tape)?;
            tapes.adv = ta;
            let (ka, _) = pair.key.forward(&xa, BnMode::Adv, pass, false)?;
            (Some(qa), Some(ka))
        }
        None => (None, None),
    };
    Ok((Representations { q_clean, q_adv, k_clean, k_adv }, tapes))
}

/// Batch-statistics embeddings of all four encoder passes, without
/// touching running statistics.
pub fn representations(pair: &EncoderPair, view_q: &Images, view_k: &Images, delta: Option<&Images>) -> Result<Representations> {
    Ok(encode(pair, view_q, view_k, delta, false)?.0)
}

fn select<'a>(tag: VariantTag, reps: &'a Representations, neg_clean: &'a Array2<f64>, neg_adv: &'a Array2<f64>) -> Result<(&'a Array2<f64>, &'a Array2<f64>, &'a Array2<f64>)> {
    let missing = || crate::AmocError::Argument(format!("variant {tag} needs a perturbation"));
    let q = match tag.query {
        Side::Clean => &reps.q_clean,
        Side::Adv => reps.q_adv.as_ref().ok_or_else(missing)?,
    };
    let k = match tag.key {
        Side::Clean => &reps.k_clean,
        Side::Adv => reps.k_adv.as_ref().ok_or_else(missing)?,
    };
    let n = match tag.bank {
        Side::Clean => neg_clean,
        Side::Adv => neg_adv,
    };
    Ok((q, k, n))
}

/// InfoNCE of the (query, key, bank) triple picked by `tag`.
pub fn variant_loss(
    tag: VariantTag,
    pair: &EncoderPair,
    banks: &Banks,
    view_q: &Images,
    view_k: &Images,
    delta: Option<&Images>,
    temperature: f64,
) -> Result<f64> {
    let reps = representations(pair, view_q, view_k, delta)?;
    let (nc, na) = (banks.clean.negatives(), banks.adv.negatives());
    let (q, k, n) = select(tag, &reps, &nc, &na)?;
    info_nce(q, k, n, temperature)
}

/// `λ·L_CCC + (1−λ)·L_ACA`.
pub fn amoc_loss(pair: &EncoderPair, banks: &Banks, view_q: &Images, view_k: &Images, delta: &Images, weights: &LossWeights) -> Result<AmocLoss> {
    let reps = representations(pair, view_q, view_k, Some(delta))?;
    let (nc, na) = (banks.clean.negatives(), banks.adv.negatives());
    Ok(combined_grad(&reps, &nc, &na, VariantTag::ACA, weights)?.0)
}

/// `λ·L_CCC + (1−λ)·L_tag` and its gradient with respect to the query
/// encoder parameters. Keys and banks are constants.
#[allow(clippy::too_many_arguments)]
pub fn amoc_loss_and_grad(
    tag: VariantTag,
    pair: &EncoderPair,
    banks: &Banks,
    view_q: &Images,
    view_k: &Images,
    delta: Option<&Images>,
    weights: &LossWeights,
) -> Result<(AmocLoss, EncoderGrads)> {
    let (reps, tapes) = encode(pair, view_q, view_k, delta, true)?;
    let (nc, na) = (banks.clean.negatives(), banks.adv.negatives());
    let (loss, dc, da) = combined_grad(&reps, &nc, &na, tag, weights)?;
    Ok((loss, backprop_queries(&pair.query, &tapes, &dc, da.as_ref())))
}

/// Loss terms plus the embedding-space gradients for the clean and the
/// perturbed query batches.
pub(crate) fn combined_grad(
    reps: &Representations,
    neg_clean: &Array2<f64>,
    neg_adv: &Array2<f64>,
    tag: VariantTag,
    weights: &LossWeights,
) -> Result<(AmocLoss, Array2<f64>, Option<Array2<f64>>)> {
    weights.validate()?;
    let lambda = weights.lambda;
    let t = weights.temperature;
    let ccc = info_nce_grad(&reps.q_clean, &reps.k_clean, neg_clean, t)?;
    let (q, k, n) = select(tag, reps, neg_clean, neg_adv)?;
    let var = info_nce_grad(q, k, n, t)?;
    let mut d_clean = ccc.d_query * lambda;
    let d_adv = match tag.query {
        Side::Clean => {
            d_clean.scaled_add(1.0 - lambda, &var.d_query);
            None
        }
        Side::Adv => Some(var.d_query * (1.0 - lambda)),
    };
    let loss = AmocLoss {
        total: lambda * ccc.loss + (1.0 - lambda) * var.loss,
        ccc: ccc.loss,
        variant: var.loss,
    };
    Ok((loss, d_clean, d_adv))
}

pub(crate) fn backprop_queries(query: &DualBnEncoder, tapes: &QueryTapes, d_clean: &Array2<f64>, d_adv: Option<&Array2<f64>>) -> EncoderGrads {
    let mut grads = EncoderGrads::zeros_like(query);
    if let Some(tape) = &tapes.clean {
        query.backward(tape, d_clean, Some(&mut grads), false);
    }
    if let (Some(tape), Some(d)) = (&tapes.adv, d_adv) {
        query.backward(tape, d, Some(&mut grads), false);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_encoder_pair, ArchConfig};
    use crate::seed::from_seed;
    use ndarray::Array4;
    use rand::Rng;

    fn setup() -> (EncoderPair, Banks, Images, Images, Images) {
        let pair = init_encoder_pair(&ArchConfig::tiny(), 3, 0.99).unwrap();
        let banks = Banks::new(32, pair.query.embed_dim(), 5).unwrap();
        let mut rng = from_seed(9);
        let vq = Array4::from_shape_fn((4, 3, 8, 8), |_| rng.random_range(0.1..0.9));
        let vk = Array4::from_shape_fn((4, 3, 8, 8), |_| rng.random_range(0.1..0.9));
        let d = Array4::from_shape_fn((4, 3, 8, 8), |_| rng.random_range(-0.03..0.03));
        (pair, banks, vq, vk, d)
    }

    #[test]
    fn ccc_is_plain_info_nce() {
        let (pair, banks, vq, vk, _) = setup();
        let l = variant_loss(VariantTag::CCC, &pair, &banks, &vq, &vk, None, 0.2).unwrap();
        let r = representations(&pair, &vq, &vk, None).unwrap();
        let direct = info_nce(&r.q_clean, &r.k_clean, &banks.clean.negatives(), 0.2).unwrap();
        assert_eq!(l, direct);
    }

    #[test]
    fn adversarial_tags_require_delta() {
        let (pair, banks, vq, vk, _) = setup();
        for tag in VariantTag::named() {
            let r = variant_loss(tag, &pair, &banks, &vq, &vk, None, 0.2);
            assert_eq!(r.is_err(), tag.uses_adversarial(), "{tag}");
        }
    }

    #[test]
    fn combination_is_linear_in_lambda() {
        let (pair, banks, vq, vk, d) = setup();
        for lambda in [0.1, 0.5, 0.9] {
            let w = LossWeights { lambda, ..Default::default() };
            let l = amoc_loss(&pair, &banks, &vq, &vk, &d, &w).unwrap();
            assert!((l.total - (lambda * l.ccc + (1.0 - lambda) * l.variant)).abs() < 1e-15);
            let aca = variant_loss(VariantTag::ACA, &pair, &banks, &vq, &vk, Some(&d), 0.2).unwrap();
            assert_eq!(aca, l.variant);
        }
        let bad = LossWeights { lambda: 1.0, ..Default::default() };
        assert!(amoc_loss(&pair, &banks, &vq, &vk, &d, &bad).is_err());
    }

    #[test]
    fn named_variants_are_finite_and_distinct() {
        let (pair, banks, vq, vk, d) = setup();
        let vals: Vec<f64> = VariantTag::named()
            .iter()
            .map(|&t| variant_loss(t, &pair, &banks, &vq, &vk, Some(&d), 0.2).unwrap())
            .collect();
        assert!(vals.iter().all(|v| v.is_finite()));
        for i in 0..vals.len() {
            for j in i + 1..vals.len() {
                assert_ne!(vals[i], vals[j]);
            }
        }
    }

    #[test]
    fn query_gradient_matches_finite_differences() {
        let (pair, banks, vq, vk, d) = setup();
        let w = LossWeights::default();
        let (_, g) = amoc_loss_and_grad(VariantTag::ACA, &pair, &banks, &vq, &vk, Some(&d), &w).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (net, gnet) in [(0usize, &g.backbone), (1, &g.head)] {
            for pi in 0..gnet.0.len() {
                for idx in [0usize, 3] {
                    if idx >= gnet.0[pi].len() {
                        continue;
                    }
                    let eval = |delta: f64| {
                        let mut p = pair.clone();
                        let n = &mut p.query.networks_mut()[net].params[pi].value;
                        n.as_slice_mut().unwrap()[idx] += delta;
                        amoc_loss(&p, &banks, &vq, &vk, &d, &w).unwrap().total
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = gnet.0[pi].as_slice().unwrap()[idx];
                    worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-8));
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
