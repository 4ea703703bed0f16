use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// GAN setting: alpha = 0.0002, beta1 = 0, beta2 = 0.99.
    pub const GAN: AdamConfig = AdamConfig { lr: 2e-4, beta1: 0.0, beta2: 0.99, eps: 1e-8 };
    /// Denoiser setting: alpha = 0.0003, beta1 = 0.9, beta2 = 0.99.
    pub const DENOISER: AdamConfig = AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 };
}

/// Adam state for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update with learning rate `lr` (overrides `config.lr`, for schedules).
    pub fn update<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data: Vec<T> = params
                .get(i)
                .data()
                .iter()
                .zip(g)
                .enumerate()
                .map(|(j, (&p, &gj))| {
                    let gj = gj.f64();
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                    let step = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                    T::of(p.f64() - step)
                })
                .collect();
            params.set(i, data);
        }
    }
}
