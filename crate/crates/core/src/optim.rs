//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    cfg: OptimConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { cfg, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Returns the updated parameters; the inputs are left untouched.
    pub fn step(&mut self, params: &[&Tensor], grads: &[&Tensor]) -> Vec<Tensor> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        params
            .iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|((p, g), (m, v))| {
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                    .map(|((&p, &g), (m, v))| {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                        p - c.lr * (update + c.weight_decay * p)
                    })
                    .collect();
                Tensor::new(p.shape().to_vec(), data).expect("shape preserved")
            })
            .collect()
    }
}
