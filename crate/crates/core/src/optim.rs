//! Gradient clipping and Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-12;

/// L2 norm over all gradients taken together.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
///
/// Gradients already within the bound (or numerically zero) come back
/// unchanged.
pub fn clip_global_norm(grads: &[Tensor], max_norm: f64) -> Vec<Tensor> {
    let norm = global_norm(grads);
    if norm <= max_norm || norm < NORM_FLOOR {
        return grads.to_vec();
    }
    let s = max_norm / norm;
    grads
        .iter()
        .map(|g| {
            let data = g.data().iter().map(|v| v * s).collect();
            Tensor::from_parts_unchecked(g.shape().to_vec(), data)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam whose weight decay is applied directly to the parameters
/// (`p <- p * (1 - lr * wd)`) rather than folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam { config, first: zeros(), second: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        self.steps += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon, weight_decay } = self.config;
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let decay = 1.0 - lr * weight_decay;

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            p.same_shape(g, "adam step")?;
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            if p.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {i} after adam step")));
            }
        }
        Ok(())
    }
}
