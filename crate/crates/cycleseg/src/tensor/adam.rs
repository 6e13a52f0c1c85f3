//! Adam optimizer with bias correction and decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Per-parameter moment accumulators plus the shared step counter. Slots are
/// positional: callers must pass parameters in the same order every step.
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, param_count: usize) -> Self {
        AdamState {
            cfg,
            step: 0,
            moments: (0..param_count).map(|_| None).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Adjust the learning rate (schedules are driven by the caller).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One optimizer step. `grads[i]` is the gradient for `params[i]`
    /// (`None` means zero). Parameters are replaced, not mutated in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "adam: {} params, {} grads, {} slots",
                params.len(),
                grads.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let n = param.numel();
            if let Some(g) = grad {
                if g.len() != n {
                    return Err(Error::shape(format!(
                        "adam: grad length {} vs param {n}",
                        g.len()
                    )));
                }
            }
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut new = param.data().to_vec();
            for i in 0..n {
                let gi = grad.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                new[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * new[i]);
            }
            **param = Tensor::new(param.shape().to_vec(), new)?;
        }
        Ok(())
    }
}
