use super::params::ParamStore;
use super::tape::Gradients;
use super::tensor::Tensor;

/// Hyperparameters of [`AdamW`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient entry still decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let grad = grads.param(id);
            let theta = params.get_mut(id);
            if let Some(g) = grad {
                assert_eq!(g.shape(), theta.shape(), "gradient shape mismatch for parameter {}", id.0);
            }
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            for (i, p) in theta.data_mut().iter_mut().enumerate() {
                *p -= c.lr * c.weight_decay * *p;
                let gi = grad.map_or(0.0, |g| g.data()[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
