use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AmocError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
    L1,
}

impl FromStr for Norm {
    type Err = AmocError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" | "l_inf" | "inf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            "l1" => Ok(Norm::L1),
            other => Err(AmocError::Argument(format!("unsupported norm `{other}`"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
            Norm::L1 => "l1",
        })
    }
}

/// Budget and schedule of an iterative attack. The absolute step is
/// `rel_step * epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub rel_step: f64,
    pub random_start: bool,
}

impl AttackSpec {
    pub fn linf(epsilon: f64, steps: usize, rel_step: f64) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
            steps,
            rel_step,
            random_start: true,
        }
    }

    /// `l∞` PGD with ε = 8/255 and the given iteration count and relative step.
    pub fn pgd_linf(steps: usize, rel_step: f64) -> Self {
        Self::linf(8.0 / 255.0, steps, rel_step)
    }

    /// PGD10 as used for adversarial training and AdEv probes.
    pub fn pgd10() -> Self {
        Self::pgd_linf(10, 0.25)
    }

    pub fn pgd20() -> Self {
        Self::pgd_linf(20, 0.1)
    }

    /// The 5-step attack used during pre-training.
    pub fn pretrain() -> Self {
        Self::pgd_linf(5, 0.25)
    }

    pub fn step_size(&self) -> f64 {
        self.rel_step * self.epsilon
    }

    /// ε = 0 is accepted as the degenerate no-op attack.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AmocError::Argument(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(AmocError::Argument("attack needs at least one step".into()));
        }
        if !(self.rel_step > 0.0 && self.rel_step.is_finite()) {
            return Err(AmocError::Argument(format!("rel_step {} must be > 0", self.rel_step)));
        }
        Ok(())
    }
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self::pretrain()
    }
}

/// Evaluation attack variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Attack {
    Pgd {
        spec: AttackSpec,
    },
    Fgsm {
        epsilon: f64,
    },
    Slide {
        spec: AttackSpec,
        quantile: f64,
    },
    DeepFool {
        norm: Norm,
        epsilon: f64,
        steps: usize,
        overshoot: f64,
    },
    CarliniWagner {
        epsilon: f64,
        steps: usize,
        lr: f64,
        confidence: f64,
        binary_search_steps: usize,
        initial_const: f64,
    },
}

impl Attack {
    pub fn norm(&self) -> Norm {
        match self {
            Attack::Pgd { spec } | Attack::Slide { spec, .. } => spec.norm,
            Attack::Fgsm { .. } => Norm::Linf,
            Attack::DeepFool { norm, .. } => *norm,
            Attack::CarliniWagner { .. } => Norm::L2,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            Attack::Pgd { spec } | Attack::Slide { spec, .. } => spec.epsilon,
            Attack::Fgsm { epsilon }
            | Attack::DeepFool { epsilon, .. }
            | Attack::CarliniWagner { epsilon, .. } => *epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub name: String,
    #[serde(flatten)]
    pub attack: Attack,
}

/// The evaluation suite: PGD10/PGD20/DeepFool in ℓ∞ (ε = 8/255), PGD50 and
/// SLIDE in ℓ1 (ε = 12), PGD50 and C&W in ℓ2 (ε = 0.5).
pub fn table_defaults() -> Vec<NamedAttack> {
    let l1 = AttackSpec {
        norm: Norm::L1,
        epsilon: 12.0,
        steps: 50,
        rel_step: 0.05,
        random_start: true,
    };
    let l2 = AttackSpec {
        norm: Norm::L2,
        epsilon: 0.5,
        steps: 50,
        rel_step: 0.1,
        random_start: true,
    };
    vec![
        NamedAttack {
            name: "PGD10-linf".into(),
            attack: Attack::Pgd { spec: AttackSpec::pgd10() },
        },
        NamedAttack {
            name: "PGD20-linf".into(),
            attack: Attack::Pgd { spec: AttackSpec::pgd20() },
        },
        NamedAttack {
            name: "DeepFool-linf".into(),
            attack: Attack::DeepFool {
                norm: Norm::Linf,
                epsilon: 8.0 / 255.0,
                steps: 50,
                overshoot: 0.02,
            },
        },
        NamedAttack {
            name: "PGD50-l1".into(),
            attack: Attack::Pgd { spec: l1 },
        },
        NamedAttack {
            name: "SLIDE-l1".into(),
            attack: Attack::Slide { spec: l1, quantile: 0.99 },
        },
        NamedAttack {
            name: "PGD50-l2".into(),
            attack: Attack::Pgd { spec: l2 },
        },
        NamedAttack {
            name: "CW-l2".into(),
            attack: Attack::CarliniWagner {
                epsilon: 0.5,
                steps: 1000,
                lr: 0.01,
                confidence: 0.0,
                binary_search_steps: 9,
                initial_const: 1e-3,
            },
        },
    ]
}
