//! Contrastive and supervised training objectives.

mod contrastive;
mod info_nce;
mod supervised;

pub use contrastive::{amoc_loss, amoc_loss_and_grad, representations, variant_loss, AmocLoss, Representations};
pub(crate) use contrastive::{backprop_queries, combined_grad, QueryTapes};
pub use info_nce::{info_nce, info_nce_grad, InfoNceGrad};
pub use supervised::{
    cross_entropy, kl_consistency, pgd_at_loss, pgd_at_loss_and_grad, trades_loss, trades_loss_and_grad, trades_perturb,
    SupervisedLoss,
};
pub(crate) use supervised::{pgd_at_step, standard_step, trades_step};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AmocError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the clean term; the variant term gets `1 - lambda`.
    pub lambda: f64,
    pub temperature: f64,
    pub trades_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperature: 0.2,
            trades_beta: 6.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(AmocError::Argument(format!("lambda {} outside (0,1)", self.lambda)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(AmocError::Argument(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.trades_beta > 0.0) || !self.trades_beta.is_finite() {
            return Err(AmocError::Argument(format!("trades_beta {} must be > 0", self.trades_beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Adv,
    Clean,
}

impl Side {
    fn letter(self) -> char {
        match self {
            Side::Adv => 'A',
            Side::Clean => 'C',
        }
    }
}

/// Which input feeds the query encoder, which feeds the key encoder, and
/// which bank supplies the negatives, written as a three-letter code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VariantTag {
    pub query: Side,
    pub key: Side,
    pub bank: Side,
}

impl VariantTag {
    pub const ACA: Self = Self::new(Side::Adv, Side::Clean, Side::Adv);
    pub const ACC: Self = Self::new(Side::Adv, Side::Clean, Side::Clean);
    pub const AAA: Self = Self::new(Side::Adv, Side::Adv, Side::Adv);
    pub const AAC: Self = Self::new(Side::Adv, Side::Adv, Side::Clean);
    pub const CAA: Self = Self::new(Side::Clean, Side::Adv, Side::Adv);
    pub const CAC: Self = Self::new(Side::Clean, Side::Adv, Side::Clean);
    pub const CCC: Self = Self::new(Side::Clean, Side::Clean, Side::Clean);

    pub const fn new(query: Side, key: Side, bank: Side) -> Self {
        Self { query, key, bank }
    }

    /// The seven named configurations: the pure clean term plus six variants.
    pub fn named() -> [VariantTag; 7] {
        [Self::CCC, Self::ACA, Self::ACC, Self::AAA, Self::AAC, Self::CAA, Self::CAC]
    }

    pub fn all() -> Vec<VariantTag> {
        let sides = [Side::Adv, Side::Clean];
        let mut out = Vec::with_capacity(8);
        for q in sides {
            for k in sides {
                for b in sides {
                    out.push(Self::new(q, k, b));
                }
            }
        }
        out
    }

    pub fn is_named(&self) -> bool {
        Self::named().contains(self)
    }

    pub fn uses_adversarial(&self) -> bool {
        self.query == Side::Adv || self.key == Side::Adv
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.query.letter(), self.key.letter(), self.bank.letter())
    }
}

impl FromStr for VariantTag {
    type Err = AmocError;

    fn from_str(s: &str) -> Result<Self> {
        let sides: Vec<Side> = s
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'A' => Ok(Side::Adv),
                'C' => Ok(Side::Clean),
                _ => Err(AmocError::Argument(format!("bad variant tag `{s}`"))),
            })
            .collect::<Result<_>>()?;
        match sides[..] {
            [q, k, b] => Ok(Self::new(q, k, b)),
            _ => Err(AmocError::Argument(format!("variant tag `{s}` must have three letters"))),
        }
    }
}

impl TryFrom<String> for VariantTag {
    type Error = AmocError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<VariantTag> for String {
    fn from(t: VariantTag) -> String {
        t.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for t in VariantTag::all() {
            assert_eq!(t.to_string().parse::<VariantTag>().unwrap(), t);
        }
        assert_eq!(VariantTag::all().iter().filter(|t| t.is_named()).count(), 7);
        assert!(!"CCA".parse::<VariantTag>().unwrap().is_named());
        assert!("AC".parse::<VariantTag>().is_err());
        assert!("AXC".parse::<VariantTag>().is_err());
        let json = serde_json::to_string(&VariantTag::ACA).unwrap();
        assert_eq!(json, "\"ACA\"");
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        for lambda in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(LossWeights { lambda, ..Default::default() }.validate().is_err());
        }
        assert!(LossWeights { temperature: 0.0, ..Default::default() }.validate().is_err());
    }
}
