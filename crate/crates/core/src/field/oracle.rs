//! Closed-form minimizer of the flow-matching objective for a finite dataset.
//!
//! With data drawn uniformly from items `x_i` (optionally smoothed by an
//! isotropic Gaussian of standard deviation `σ`, the *bandwidth*) and the path
//! `z_t = (1 − t)·x + t·ε`, the conditional law of `z_t` given item `i` is
//! `N((1 − t)·x_i, s²·I)` with `s² = (1 − t)²σ² + t²`. The optimal velocity is
//! the posterior expectation of `ε − x`:
//!
//! ```text
//! a_i = −‖z − (1 − t)x_i‖² / (2 s²)          w = softmax(a)
//! v   = Σ_i w_i ( c·(z − (1 − t)x_i) − x_i ),  c = (t − (1 − t)σ²) / s²
//! ```
//!
//! For `σ = 0` this is `Σ_i w_i (z − x_i) / t`.

use std::sync::Arc;

use super::{CallCounter, VelocityField};
use crate::error::{Error, Result};
use crate::tensor::LatentTensor;
use crate::toy_world::{Condition, Dataset};

/// Posterior weights below this are dropped from the mean; their
/// contribution is far below `f32` resolution.
const NEGLIGIBLE_WEIGHT: f64 = 1e-15;

pub struct OracleField {
    dataset: Arc<Dataset>,
    t_min: f64,
    bandwidth: f64,
    evals: CallCounter,
    vjps: CallCounter,
}

/// Posterior over the selected items at one `(z, t)`.
struct Posterior {
    items: Vec<usize>,
    weights: Vec<f64>,
    /// `Σ w_i x_i`
    mean: Vec<f64>,
    /// `s²`
    var: f64,
}

impl OracleField {
    pub const DEFAULT_T_MIN: f64 = 1e-3;

    pub fn new(dataset: Arc<Dataset>) -> Self {
        Self::with_params(dataset, Self::DEFAULT_T_MIN, 0.0).expect("default parameters are valid")
    }

    pub fn with_params(dataset: Arc<Dataset>, t_min: f64, bandwidth: f64) -> Result<Self> {
        if !(t_min > 0.0) {
            return Err(Error::Config(format!("t_min must be positive, got {t_min}")));
        }
        if !(bandwidth >= 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!("bandwidth must be finite and >= 0, got {bandwidth}")));
        }
        Ok(Self { dataset, t_min, bandwidth, evals: CallCounter::default(), vjps: CallCounter::default() })
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside (0, 1]")));
        }
        Ok(())
    }

    fn item(&self, i: usize) -> &[f32] {
        self.dataset.items()[i].latent.data()
    }

    /// Squared distance `‖z − (1 − t)x_i‖²`.
    fn residual_sq(&self, z: &[f32], i: usize, t: f64) -> f64 {
        let keep = 1.0 - t;
        z.iter()
            .zip(self.item(i))
            .map(|(&zv, &xv)| {
                let r = zv as f64 - keep * xv as f64;
                r * r
            })
            .sum()
    }

    fn posterior(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<Posterior> {
        z.ensure_same_shape(&self.dataset.items()[0].latent)?;
        let items = self.dataset.subset(condition)?;
        let var = (1.0 - t).powi(2) * self.bandwidth.powi(2) + t * t;
        let logits: Vec<f64> = items.iter().map(|&i| -self.residual_sq(z.data(), i, t) / (2.0 * var)).collect();
        let weights = softmax(&logits);
        let mut mean = vec![0.0f64; z.len()];
        for (&i, &w) in items.iter().zip(&weights) {
            if w < NEGLIGIBLE_WEIGHT {
                continue;
            }
            for (m, &x) in mean.iter_mut().zip(self.item(i)) {
                *m += w * x as f64;
            }
        }
        Ok(Posterior { items, weights, mean, var })
    }

    /// Softmax weights over the selected items, in subset order.
    pub fn weights(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<Vec<f64>> {
        Self::check_t(t)?;
        Ok(self.posterior(z, t.max(self.t_min), condition)?.weights)
    }

    /// Posterior mean of the clean latent, `E[x₀ | z_t]`.
    pub fn posterior_mean(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<LatentTensor> {
        Self::check_t(t)?;
        let t = t.max(self.t_min);
        let p = self.posterior(z, t, condition)?;
        let shrink = (1.0 - t) * self.bandwidth.powi(2) / p.var;
        LatentTensor::checked(
            z.shape(),
            z.data().iter().zip(&p.mean).map(|(&zv, &m)| m + shrink * (zv as f64 - (1.0 - t) * m)),
            "oracle posterior mean",
        )
    }

    pub fn velocity(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<LatentTensor> {
        Self::check_t(t)?;
        if t < self.t_min {
            let items = self.dataset.subset(condition)?;
            z.ensure_same_shape(&self.dataset.items()[0].latent)?;
            let nearest = items
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    self.residual_sq(z.data(), a, t).total_cmp(&self.residual_sq(z.data(), b, t))
                })
                .expect("subset is non-empty");
            let denom = t.max(self.t_min);
            return LatentTensor::checked(
                z.shape(),
                z.data().iter().zip(self.item(nearest)).map(|(&zv, &x)| (zv as f64 - x as f64) / denom),
                "oracle velocity (t < t_min)",
            );
        }
        let p = self.posterior(z, t, condition)?;
        let c = (t - (1.0 - t) * self.bandwidth.powi(2)) / p.var;
        LatentTensor::checked(
            z.shape(),
            z.data().iter().zip(&p.mean).map(|(&zv, &m)| c * (zv as f64 - (1.0 - t) * m) - m),
            "oracle velocity",
        )
    }

    /// `Jᵀu` for `J = ∂v/∂z`:
    /// `Jᵀu = c·u + ((1 − t)/s²)·Σ_i w_i (q_i − q̄) x_i`, `q_i = ⟨c·r_i − x_i, u⟩`.
    pub fn velocity_vjp(&self, z: &LatentTensor, t: f64, condition: Condition, u: &LatentTensor) -> Result<LatentTensor> {
        Self::check_t(t)?;
        if t < self.t_min {
            return Err(Error::Domain(format!("vjp requires t >= t_min ({}), got {t}", self.t_min)));
        }
        z.ensure_same_shape(u)?;
        let p = self.posterior(z, t, condition)?;
        let c = (t - (1.0 - t) * self.bandwidth.powi(2)) / p.var;
        let zu: f64 = z.data().iter().zip(u.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        // q_i = c⟨z,u⟩ − (c(1 − t) + 1)⟨x_i,u⟩
        let q: Vec<f64> = p
            .items
            .iter()
            .map(|&i| {
                let xu: f64 = self.item(i).iter().zip(u.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
                c * zu - (c * (1.0 - t) + 1.0) * xu
            })
            .collect();
        let q_bar: f64 = p.weights.iter().zip(&q).map(|(w, q)| w * q).sum();
        let mut acc = vec![0.0f64; z.len()];
        let k = (1.0 - t) / p.var;
        for ((&i, &w), &qi) in p.items.iter().zip(&p.weights).zip(&q) {
            let coef = k * w * (qi - q_bar);
            if coef == 0.0 {
                continue;
            }
            for (a, &x) in acc.iter_mut().zip(self.item(i)) {
                *a += coef * x as f64;
            }
        }
        LatentTensor::checked(
            z.shape(),
            u.data().iter().zip(&acc).map(|(&uv, &a)| c * uv as f64 + a),
            "oracle vjp",
        )
    }
}

/// Numerically stable softmax via log-sum-exp.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl VelocityField for OracleField {
    fn eval(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<LatentTensor> {
        self.evals.bump();
        self.velocity(z, t, condition)
    }

    fn eval_count(&self) -> u64 {
        self.evals.get()
    }

    fn vjp(&self, z: &LatentTensor, t: f64, condition: Condition, u: &LatentTensor) -> Result<LatentTensor> {
        self.vjps.bump();
        self.velocity_vjp(z, t, condition, u)
    }

    fn vjp_count(&self) -> u64 {
        self.vjps.get()
    }

    fn name(&self) -> &str {
        "oracle"
    }
}
