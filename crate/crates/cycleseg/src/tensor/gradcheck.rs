//! Central finite-difference gradient oracle.
//!
//! Numeric gradients are independent of the tape: the caller supplies a pure
//! loss evaluation and the analytic gradients it wants checked; this module
//! perturbs parameter components and compares.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// central-difference step
    pub h: f64,
    /// components probed per tensor (all of them when numel is smaller)
    pub probes_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            probes_per_tensor: 24,
            seed: 0x5eed,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1)`
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Probes components of every parameter with central differences
/// `(f(x+h) - f(x-h)) / 2h` and returns the worst relative error against the
/// supplied analytic gradients.
pub fn check_gradients(
    eval: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    cfg: &GradCheck,
) -> Result<f64> {
    assert_eq!(params.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for (pi, (param, grad)) in params.iter().zip(analytic).enumerate() {
        assert_eq!(param.numel(), grad.len(), "analytic grad length mismatch");
        let n = param.numel();
        let picks: Vec<usize> = if n <= cfg.probes_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.probes_per_tensor).into_vec()
        };
        for ci in picks {
            let plus = eval(&bumped(params, pi, ci, cfg.h))?;
            let minus = eval(&bumped(params, pi, ci, -cfg.h))?;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            worst = worst.max(relative_error(grad[ci], numeric));
        }
    }
    Ok(worst)
}

fn bumped(params: &[Tensor], pi: usize, ci: usize, delta: f64) -> Vec<Tensor> {
    let mut out = params.to_vec();
    let mut data = params[pi].data().to_vec();
    data[ci] += delta;
    out[pi] = Tensor::new(params[pi].shape().to_vec(), data).expect("same shape");
    out
}
