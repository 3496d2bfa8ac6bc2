//! Bias-corrected Adam over flat `f32` parameter buffers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    /// First moment.
    pub m: Vec<f64>,
    /// Second moment.
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self::with_params(n, AdamParams::default())
    }

    pub fn with_params(n: usize, params: AdamParams) -> Self {
        Self { params, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    /// One descending step: `x ← x − lr·m̂/(√v̂ + eps)`.
    pub fn update(&mut self, x: &mut [f32], grad: &[f32], lr: f64) {
        assert_eq!(x.len(), grad.len(), "parameter/gradient length mismatch");
        assert_eq!(x.len(), self.m.len(), "optimizer state length mismatch");
        let AdamParams { beta1, beta2, eps } = self.params;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..x.len() {
            let g = grad[i] as f64;
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            x[i] = (x[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
}
