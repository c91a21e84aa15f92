use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `theta` at step `t ≥ 1`.
pub fn adam_step(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    debug_assert!(t >= 1);
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam state for every tensor of a [`ParamStore`], in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let theta = params.get_mut(id);
            if theta.shape() != grads[i].shape() {
                return Err(Error::shape("adam", theta.shape(), grads[i].shape()));
            }
            adam_step(
                theta.data_mut(),
                grads[i].data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step,
                &self.cfg,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = AdamConfig::default();
        let (mut th, mut m, mut v) = (vec![0.3, -1.0], vec![0.0; 2], vec![0.0; 2]);
        for t in 1..=10 {
            adam_step(&mut th, &[0.0, 0.0], &mut m, &mut v, t, &cfg);
        }
        assert_eq!(th, vec![0.3, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let (mut th, mut m, mut v) = (vec![0.0], vec![0.0], vec![0.0]);
            adam_step(&mut th, &[g], &mut m, &mut v, 1, &cfg);
            assert!((th[0].abs() - cfg.lr).abs() < cfg.lr * 1e-4, "g={g}: {}", th[0]);
            assert_eq!(th[0].signum(), -g.signum());
        }
    }

    #[test]
    fn scalar_trace_on_square() {
        // Hand-rolled reference with the textbook recurrences.
        let cfg = AdamConfig::default();
        let (mut th, mut m, mut v) = (vec![1.0], vec![0.0], vec![0.0]);
        let (mut rt, mut rm, mut rv) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5u64 {
            let g = [2.0 * th[0]];
            adam_step(&mut th, &g, &mut m, &mut v, t, &cfg);
            let g = 2.0 * rt;
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(t as i32));
            let vh = rv / (1.0 - 0.999f64.powi(t as i32));
            rt -= 5e-4 * mh / (vh.sqrt() + 1e-8);
            assert!((th[0] - rt).abs() < 1e-12);
        }
    }
}
