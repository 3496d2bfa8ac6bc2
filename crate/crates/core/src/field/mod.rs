//! Velocity fields `v(z_t, t, condition)`.
//!
//! The trait exposes values only. Guidance code that wants a gradient must
//! either treat the returned velocity as a constant or call [`VelocityField::vjp`]
//! explicitly, which only the analytic oracle implements.

mod mlp;
mod oracle;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use mlp::{fm_train_step, MlpField};
pub use oracle::OracleField;

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;
use crate::toy_world::Condition;

pub trait VelocityField: Send + Sync {
    fn eval(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<LatentTensor>;

    /// Total number of `eval` calls served so far.
    fn eval_count(&self) -> u64;

    /// Vector-Jacobian product `(∂v/∂z)ᵀ u`.
    fn vjp(&self, _z: &LatentTensor, _t: f64, _condition: Condition, _u: &LatentTensor) -> Result<LatentTensor> {
        Err(Error::Capability(format!("{} does not provide vector-Jacobian products", self.name())))
    }

    fn vjp_count(&self) -> u64 {
        0
    }

    fn name(&self) -> &str;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn eval(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<LatentTensor> {
        (**self).eval(z, t, condition)
    }
    fn eval_count(&self) -> u64 {
        (**self).eval_count()
    }
    fn vjp(&self, z: &LatentTensor, t: f64, condition: Condition, u: &LatentTensor) -> Result<LatentTensor> {
        (**self).vjp(z, t, condition, u)
    }
    fn vjp_count(&self) -> u64 {
        (**self).vjp_count()
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Arc<F> {
    fn eval(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<LatentTensor> {
        (**self).eval(z, t, condition)
    }
    fn eval_count(&self) -> u64 {
        (**self).eval_count()
    }
    fn vjp(&self, z: &LatentTensor, t: f64, condition: Condition, u: &LatentTensor) -> Result<LatentTensor> {
        (**self).vjp(z, t, condition, u)
    }
    fn vjp_count(&self) -> u64 {
        (**self).vjp_count()
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Monotone call counter shared by field implementations.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// A view of another field with its own call counters, so one shared field
/// can be metered per branch (target vs source) within a run.
pub struct Counted<F> {
    inner: F,
    evals: CallCounter,
    vjps: CallCounter,
}

impl<F: VelocityField> Counted<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, evals: CallCounter::default(), vjps: CallCounter::default() }
    }
}

impl<F: VelocityField> VelocityField for Counted<F> {
    fn eval(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<LatentTensor> {
        self.evals.bump();
        self.inner.eval(z, t, condition)
    }
    fn eval_count(&self) -> u64 {
        self.evals.get()
    }
    fn vjp(&self, z: &LatentTensor, t: f64, condition: Condition, u: &LatentTensor) -> Result<LatentTensor> {
        self.vjps.bump();
        self.inner.vjp(z, t, condition, u)
    }
    fn vjp_count(&self) -> u64 {
        self.vjps.get()
    }
    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// Classifier-free guidance: `v_empty + s·(v_cond − v_empty)`, two base evals.
pub fn cfg_velocity(
    field: &dyn VelocityField,
    z: &LatentTensor,
    t: f64,
    condition: Condition,
    scale: f64,
) -> Result<LatentTensor> {
    if !(scale >= 0.0) {
        return Err(Error::Domain(format!("guidance scale {scale} must be >= 0")));
    }
    let v_cond = field.eval(z, t, condition)?;
    let v_empty = field.eval(z, t, Condition::Empty)?;
    v_empty.lin_comb(1.0 - scale, &v_cond, scale)
}

/// Field wrapper applying classifier-free guidance to every evaluation.
pub struct CfgField<F> {
    base: F,
    scale: f64,
    calls: CallCounter,
    vjps: CallCounter,
}

impl<F: VelocityField> CfgField<F> {
    pub fn new(base: F, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) {
            return Err(Error::Domain(format!("guidance scale {scale} must be >= 0")));
        }
        Ok(Self { base, scale, calls: CallCounter::default(), vjps: CallCounter::default() })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn base(&self) -> &F {
        &self.base
    }
}

impl<F: VelocityField> VelocityField for CfgField<F> {
    fn eval(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<LatentTensor> {
        self.calls.bump();
        cfg_velocity(&self.base, z, t, condition, self.scale)
    }

    fn eval_count(&self) -> u64 {
        self.calls.get()
    }

    fn vjp(&self, z: &LatentTensor, t: f64, condition: Condition, u: &LatentTensor) -> Result<LatentTensor> {
        self.vjps.bump();
        let g_cond = self.base.vjp(z, t, condition, u)?;
        let g_empty = self.base.vjp(z, t, Condition::Empty, u)?;
        g_empty.lin_comb(1.0 - self.scale, &g_cond, self.scale)
    }

    fn vjp_count(&self) -> u64 {
        self.vjps.get()
    }

    fn name(&self) -> &str {
        "cfg"
    }
}
