//! Velocity regularization against the accumulated flow direction.
//!
//! `v_avg = (z_t − z₁)/(t − 1)` is the mean velocity since the start of
//! sampling. The current velocity is split into its projection on `v_avg` and
//! the orthogonal remainder, and the remainder is decayed by `γ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::latent_prediction;
use crate::tensor::{inner_product, LatentTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionScope {
    /// One projection coefficient over the whole flattened tensor.
    #[default]
    Global,
    /// Independent projection per frame slab.
    PerFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub gamma: f64,
    pub epsilon_norm: f64,
    pub scope: ProjectionScope,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { gamma: 0.1, epsilon_norm: 1e-8, scope: ProjectionScope::Global }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma = {} outside [0, 1]", self.gamma)));
        }
        if !(self.epsilon_norm > 0.0) {
            return Err(Error::Config("epsilon_norm must be positive".into()));
        }
        Ok(())
    }
}

/// `(z_t − z₁)/(t − 1)`; undefined at `t = 1`.
pub fn average_velocity(z_t: &LatentTensor, z1: &LatentTensor, t: f64) -> Result<LatentTensor> {
    if t >= 1.0 {
        return Err(Error::DegenerateTime);
    }
    let inv = 1.0 / (t - 1.0);
    z_t.zip_map(z1, "average_velocity", |a, b| (a - b) * inv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub proj: LatentTensor,
    pub orth: LatentTensor,
    /// `⟨v, v_avg⟩ / ‖v_avg‖²`, one entry per projection group.
    pub coefficients: Vec<f64>,
}

/// Splits `v` into `v_proj` along `v_avg` and `v_orth = v − v_proj`.
///
/// Fails with [`Error::DegenerateDirection`] when `‖v_avg‖² < eps·numel`.
pub fn decompose(v: &LatentTensor, v_avg: &LatentTensor, epsilon_norm: f64) -> Result<Decomposition> {
    v.ensure_same_shape(v_avg)?;
    let denom = v_avg.norm_sq();
    if denom < epsilon_norm * v.len() as f64 {
        return Err(Error::DegenerateDirection);
    }
    let c = inner_product(v, v_avg)? / denom;
    let proj = v_avg.scale(c)?;
    let orth = v.zip_map(v_avg, "decompose", |a, b| a - c * b)?;
    Ok(Decomposition { proj, orth, coefficients: vec![c] })
}

/// Per-frame variant: frames whose `v_avg` slab is degenerate keep `v` whole
/// in the projection (coefficient reported as NaN).
pub fn decompose_per_frame(v: &LatentTensor, v_avg: &LatentTensor, epsilon_norm: f64) -> Result<Decomposition> {
    v.ensure_same_shape(v_avg)?;
    let shape = v.shape();
    let n = shape.frame_len();
    let mut proj = Vec::with_capacity(v.len());
    let mut orth = Vec::with_capacity(v.len());
    let mut coefficients = Vec::with_capacity(shape.frames);
    for k in 0..shape.frames {
        let (vf, af) = (v.frame(k), v_avg.frame(k));
        let denom: f64 = af.iter().map(|&a| (a as f64).powi(2)).sum();
        if denom < epsilon_norm * n as f64 {
            proj.extend(vf.iter().map(|&x| x as f64));
            orth.extend(std::iter::repeat_n(0.0, n));
            coefficients.push(f64::NAN);
            continue;
        }
        let c = vf.iter().zip(af).map(|(&x, &a)| x as f64 * a as f64).sum::<f64>() / denom;
        proj.extend(af.iter().map(|&a| c * a as f64));
        orth.extend(vf.iter().zip(af).map(|(&x, &a)| x as f64 - c * a as f64));
        coefficients.push(c);
    }
    Ok(Decomposition {
        proj: LatentTensor::checked(shape, proj.into_iter(), "decompose_per_frame")?,
        orth: LatentTensor::checked(shape, orth.into_iter(), "decompose_per_frame")?,
        coefficients,
    })
}

/// `v_proj + γ·v_orth`.
pub fn regulate(proj: &LatentTensor, orth: &LatentTensor, gamma: f64) -> Result<LatentTensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma = {gamma} outside [0, 1]")));
    }
    proj.lin_comb(1.0, orth, gamma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regulated {
    pub z0_hat: LatentTensor,
    pub v_reg: LatentTensor,
    /// Present when the projection was applied (not at `t = 1` or for a
    /// degenerate `v_avg`).
    pub average: Option<(LatentTensor, Decomposition)>,
}

/// Regulated velocity and the resulting prediction `z_t − horizon·v_reg`.
/// `horizon` is `t` for the latent prediction.
pub fn regulate_velocity(
    z_t: &LatentTensor,
    z1: &LatentTensor,
    v_t: &LatentTensor,
    t: f64,
    horizon: f64,
    config: &RegularizerConfig,
) -> Result<Regulated> {
    let split = match average_velocity(z_t, z1, t) {
        Ok(v_avg) => {
            let d = match config.scope {
                ProjectionScope::Global => decompose(v_t, &v_avg, config.epsilon_norm),
                ProjectionScope::PerFrame => decompose_per_frame(v_t, &v_avg, config.epsilon_norm),
            };
            match d {
                Ok(d) => Some((v_avg, d)),
                Err(Error::DegenerateDirection) => None,
                Err(e) => return Err(e),
            }
        }
        Err(Error::DegenerateTime) => None,
        Err(e) => return Err(e),
    };
    let v_reg = match &split {
        Some((_, d)) => regulate(&d.proj, &d.orth, config.gamma)?,
        None => v_t.clone(),
    };
    let z0_hat = z_t.lin_comb(1.0, &v_reg, -horizon)?;
    Ok(Regulated { z0_hat, v_reg, average: split })
}

/// Returns `(ẑ₀, v_reg)` with `ẑ₀ = z_t − t·v_reg`; falls back to `v_reg = v_t`
/// at `t = 1` or when `v_avg` is degenerate.
pub fn regulated_prediction(
    z_t: &LatentTensor,
    z1: &LatentTensor,
    v_t: &LatentTensor,
    t: f64,
    config: &RegularizerConfig,
) -> Result<(LatentTensor, LatentTensor)> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("t = {t} outside (0, 1]")));
    }
    let r = regulate_velocity(z_t, z1, v_t, t, t, config)?;
    debug_assert_eq!(r.z0_hat, latent_prediction(z_t, &r.v_reg, t)?);
    Ok((r.z0_hat, r.v_reg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::lerp_path;

    fn v(values: &[f32]) -> LatentTensor {
        LatentTensor::from_slice(values).unwrap()
    }

    #[test]
    fn average_velocity_examples() {
        let out = average_velocity(&v(&[0.2]), &v(&[1.0]), 0.6).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-6);
        let zero = average_velocity(&v(&[0.3, -1.0]), &v(&[0.3, -1.0]), 0.4).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
        assert!(matches!(average_velocity(&v(&[0.0]), &v(&[1.0]), 1.0), Err(Error::DegenerateTime)));
    }

    #[test]
    fn average_velocity_on_linear_path() {
        let z0 = v(&[0.5, -1.0, 2.0]);
        let z1 = v(&[-0.3, 0.7, 1.1]);
        let truth = z1.sub(&z0).unwrap();
        for t in [0.0, 0.2, 0.5, 0.9] {
            let zt = lerp_path(&z0, &z1, t).unwrap();
            let avg = average_velocity(&zt, &z1, t).unwrap();
            assert!(avg.max_abs_diff(&truth).unwrap() < 1e-5, "t = {t}");
        }
    }

    #[test]
    fn decompose_examples() {
        let a = v(&[1.0, 2.0]);
        let d = decompose(&a.scale(3.0).unwrap(), &a, 1e-8).unwrap();
        assert!(d.orth.norm() < 1e-6);
        let d = decompose(&v(&[2.0, -1.0]), &v(&[1.0, 2.0]), 1e-8).unwrap();
        assert_eq!(d.proj.data(), &[0.0, 0.0]);
        assert_eq!(d.orth.data(), &[2.0, -1.0]);
        let d = decompose(&v(&[1.0, 1.0]), &v(&[1.0, 0.0]), 1e-8).unwrap();
        assert_eq!(d.proj.data(), &[1.0, 0.0]);
        assert_eq!(d.orth.data(), &[0.0, 1.0]);
    }

    #[test]
    fn decompose_degenerate() {
        assert!(matches!(decompose(&v(&[1.0, 1.0]), &v(&[0.0, 0.0]), 1e-8), Err(Error::DegenerateDirection)));
    }

    #[test]
    fn regulate_examples() {
        let out = regulate(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), 0.1).unwrap();
        assert_eq!(out.data(), &[1.0, 0.1]);
        assert_eq!(regulate(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), 0.0).unwrap().data(), &[1.0, 0.0]);
        assert!(regulate(&v(&[1.0]), &v(&[0.0]), 1.5).is_err());
    }

    #[test]
    fn first_step_falls_back_to_raw_velocity() {
        let z = v(&[0.4, -0.2]);
        let vt = v(&[1.0, 2.0]);
        let cfg = RegularizerConfig::default();
        let (pred, vreg) = regulated_prediction(&z, &z, &vt, 1.0, &cfg).unwrap();
        assert_eq!(vreg, vt);
        assert_eq!(pred, latent_prediction(&z, &vt, 1.0).unwrap());
    }

    #[test]
    fn degenerate_average_keeps_raw_velocity() {
        let z = v(&[0.4, -0.2]);
        let vt = v(&[1.0, 2.0]);
        let (_, vreg) = regulated_prediction(&z, &z, &vt, 0.5, &RegularizerConfig::default()).unwrap();
        assert_eq!(vreg, vt);
    }

    #[test]
    fn linear_path_recovers_clean_latent_for_any_gamma() {
        let z0 = v(&[0.5, -1.0, 2.0, 0.1]);
        let z1 = v(&[-0.3, 0.7, 1.1, -2.0]);
        let vt = z1.sub(&z0).unwrap();
        for gamma in [0.0, 0.1, 0.5, 1.0] {
            let cfg = RegularizerConfig { gamma, ..Default::default() };
            for t in [0.3, 0.8] {
                let zt = lerp_path(&z0, &z1, t).unwrap();
                let (pred, _) = regulated_prediction(&zt, &z1, &vt, t, &cfg).unwrap();
                assert!(pred.max_abs_diff(&z0).unwrap() < 1e-5);
            }
        }
    }

    #[test]
    fn per_frame_scope_projects_each_frame() {
        use crate::tensor::Shape;
        let shape = Shape::new(2, 1, 1, 2).unwrap();
        let vt = LatentTensor::from_vec(shape, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let avg = LatentTensor::from_vec(shape, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = decompose_per_frame(&vt, &avg, 1e-8).unwrap();
        assert_eq!(d.proj.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.orth.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(d.coefficients, vec![1.0, 1.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
            (2usize..32).prop_flat_map(|n| {
                (prop::collection::vec(-3.0f32..3.0, n), prop::collection::vec(-3.0f32..3.0, n))
            })
        }

        proptest! {
            #[test]
            fn contraction_and_idempotence((vt, avg) in vecs(), gamma in 0.0f64..=1.0) {
                let (vt, avg) = (v(&vt), v(&avg));
                prop_assume!(avg.norm_sq() > 1e-3);
                let d = decompose(&vt, &avg, 1e-8).unwrap();
                let vreg = regulate(&d.proj, &d.orth, gamma).unwrap();
                prop_assert!(vreg.norm() <= vt.norm() * (1.0 + 1e-6) + 1e-6);
                let again = decompose(&vreg, &avg, 1e-8).unwrap();
                let back = regulate(&again.proj, &again.orth, 1.0).unwrap();
                prop_assert!(back.max_abs_diff(&vreg).unwrap() <= 1e-5 * (1.0 + vreg.norm()));
            }
        }
    }
}
