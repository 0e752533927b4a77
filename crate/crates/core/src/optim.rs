//! Adam/AdamW with optional cosine learning-rate decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW). Zero disables it.
    pub weight_decay: f64,
    /// When set, the learning rate follows a cosine decay to zero over this
    /// many steps.
    pub cosine_total_steps: Option<usize>,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            cosine_total_steps: None,
        }
    }

    pub fn adamw_cosine(lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            cosine_total_steps: Some(total_steps),
        }
    }
}

/// First-order optimizer state over a fixed list of parameter blocks.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, block_sizes: &[usize]) -> Self {
        Adam {
            cfg,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        match self.cfg.cosine_total_steps {
            Some(total) if total > 0 => {
                let frac = (self.t as f64 / total as f64).min(1.0);
                self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => self.cfg.lr,
        }
    }

    /// One descent step; `params[i]` and `grads[i]` must match the block
    /// sizes given at construction.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let lr = self.current_lr();
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            for (j, pj) in p.iter_mut().enumerate() {
                let g = grads[i][j];
                self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * g;
                self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * g * g;
                let m_hat = self.m[i][j] / bias1;
                let v_hat = self.v[i][j] / bias2;
                *pj -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *pj);
            }
        }
    }
}
