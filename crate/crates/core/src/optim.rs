use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for a single parameter matrix.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, params: AdamParams) -> Self {
        Adam {
            lr,
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut Matrix, grad: &Matrix) {
        debug_assert_eq!(weights.as_slice().len(), self.m.len());
        debug_assert_eq!(grad.as_slice().len(), self.m.len());
        self.t = self.t.saturating_add(1);
        let AdamParams { beta1, beta2, eps } = self.params;
        let bias1 = 1.0 - beta1.powi(self.t);
        let bias2 = 1.0 - beta2.powi(self.t);
        for (((w, &g), m), v) in weights
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
