use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments and step counter for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptState {
    pub fn new(optimizer: Optimizer, learning_rate: f64, num_params: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            weight_decay: 0.0,
            optimizer,
            seed,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place and rejects non-finite results.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        ensure_dim("optimizer parameters", self.first.len(), params.len())?;
        ensure_dim("optimizer gradients", params.len(), grads.len())?;
        self.step += 1;
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        match self.optimizer {
            Optimizer::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * (g + wd * *p);
                }
            }
            Optimizer::SgdMomentum { beta } => {
                for ((p, &g), m) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    *m = beta * *m + (g + wd * *p);
                    *p -= lr * *m;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - libm::pow(beta1, f64::from(t));
                let c2 = 1.0 - libm::pow(beta2, f64::from(t));
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let g = g + wd * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / (math::sqrt(*v / c2) + eps);
                }
            }
        }
        if params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("parameters after optimizer step"))
        }
    }

    /// Sample order for `epoch`: identity for full-batch training, otherwise a
    /// permutation derived from `(seed, epoch)` split into chunks.
    pub fn batches(&self, n: usize, batch_size: Option<usize>, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        match batch_size {
            None => vec![order],
            Some(b) if b >= n => vec![order],
            Some(b) => {
                let mut rng = math::rng_from(math::mix_seed(self.seed, epoch));
                order.shuffle(&mut rng);
                order.chunks(b.max(1)).map(<[usize]>::to_vec).collect()
            }
        }
    }
}
