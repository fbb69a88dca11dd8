use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the trainable parameters of one or more layers, with moment
/// state keyed by `(group, parameter path)`.
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update to every trainable parameter of `nets` (their
    /// names prefix the parameter paths) and clears their gradients.
    pub fn step(&mut self, nets: &mut [(&str, &mut dyn Network)]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for (group, net) in nets.iter_mut() {
            let moments = &mut self.moments;
            net.params_mut(&mut |name, p| {
                if !p.trainable {
                    return;
                }
                let (m, v) = moments
                    .entry(format!("{group}/{name}"))
                    .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
                for i in 0..p.value.len() {
                    let g = p.grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
                p.grad.fill(0.0);
            });
        }
    }
}
