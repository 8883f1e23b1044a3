//! Gradient-based adversarial example generation.

mod contrastive;
mod cw;
mod deepfool;
mod pgd;
mod project;
mod spec;

pub use contrastive::contrastive_perturb;
pub(crate) use contrastive::craft_delta;
pub use cw::{cw_l2, CwConfig, CwResult};
pub use deepfool::{deepfool, DeepFoolResult};
pub use pgd::{ce_objective, fgsm, pgd, pgd_from, pgd_step_direction, random_start, slide, slide_direction};
pub use project::{clip_unit, project, project_l1, project_l2, project_linf};
pub use spec::{table_defaults, Attack, AttackSpec, NamedAttack, Norm};

use crate::dataio::Images;

/// An input-space objective: summed loss over the batch and its gradient.
pub trait InputObjective {
    fn value_and_grad(&mut self, x: &Images) -> crate::Result<(f64, Images)>;
}

impl<F> InputObjective for F
where
    F: FnMut(&Images) -> crate::Result<(f64, Images)>,
{
    fn value_and_grad(&mut self, x: &Images) -> crate::Result<(f64, Images)> {
        self(x)
    }
}

pub(crate) fn sample_len(x: &Images) -> usize {
    x.len() / x.shape()[0].max(1)
}
