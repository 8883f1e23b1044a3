use crate::model::{Grads, Network, Tensor};

/// SGD with heavy-ball momentum (no Nesterov). Weight decay is added to the
/// gradient of parameters flagged `decay` only.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn from_parts(momentum: f64, weight_decay: f64, velocity: Vec<Vec<Tensor>>) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Per-network momentum buffers; empty before the first step.
    pub fn velocity(&self) -> &[Vec<Tensor>] {
        &self.velocity
    }

    /// `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v` for every parameter.
    pub fn step(&mut self, nets: &mut [&mut Network], grads: &[&Grads], lr: f64) {
        assert_eq!(nets.len(), grads.len(), "one gradient set per network");
        if self.velocity.is_empty() {
            self.velocity = nets
                .iter()
                .map(|n| n.params.iter().map(|p| Tensor::zeros(p.value.raw_dim())).collect())
                .collect();
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((net, g), vel) in nets.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((p, gp), v) in net.params.iter_mut().zip(&g.0).zip(vel.iter_mut()) {
                let decay = if p.decay { wd } else { 0.0 };
                ndarray::Zip::from(&mut p.value).and(gp).and(v).for_each(|w, &gv, vv| {
                    *vv = mu * *vv + gv + decay * *w;
                    *w -= lr * *vv;
                });
            }
        }
    }
}
