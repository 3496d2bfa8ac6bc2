//! Latent-space flow guidance.
//!
//! The target latent `z_t` is nudged with a few Adam steps so that its latent
//! prediction (and the frame differences of that prediction) match the
//! source's. The field's velocity is held constant during differentiation, so
//! `∂ẑ₀/∂z_t = I` and the gradient is closed-form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::optim::Adam;
use crate::regularization::{regulate_velocity, ProjectionScope, Regulated, RegularizerConfig};
use crate::rng::{sample_gaussian, SeededRng};
use crate::sampler::target_velocity;
use crate::tensor::{lerp_path, LatentTensor, Shape};
use crate::toy_world::Condition;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceRep {
    /// `ẑ₀ = z_t − t·v` of the noised source.
    #[default]
    LatentPrediction,
    /// The clean source latent itself.
    CleanLatent,
    /// The source velocity `v_t`.
    Velocity,
    /// One Euler step of the noised source, `z_t − dt·v`.
    DenoisedLatent,
}

impl SourceRep {
    pub const ALL: [SourceRep; 4] =
        [SourceRep::LatentPrediction, SourceRep::CleanLatent, SourceRep::Velocity, SourceRep::DenoisedLatent];

    pub fn as_str(&self) -> &'static str {
        match self {
            SourceRep::LatentPrediction => "latent_prediction",
            SourceRep::CleanLatent => "clean_latent",
            SourceRep::Velocity => "velocity",
            SourceRep::DenoisedLatent => "denoised_latent",
        }
    }

    /// Whether building the representation costs a source-branch field eval.
    pub fn needs_source_eval(&self) -> bool {
        !matches!(self, SourceRep::CleanLatent)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffMode {
    /// All ordered pairs `i ≠ j`: `F·(F−1)` slabs.
    #[default]
    AllPairs,
    /// Consecutive frames: `F−1` slabs.
    Adjacent,
}

impl DiffMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DiffMode::AllPairs => "all_pairs",
            DiffMode::Adjacent => "adjacent",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub k_opt: usize,
    pub t_opt: usize,
    pub source_rep: SourceRep,
    pub diff_mode: DiffMode,
    pub gamma: f64,
    pub epsilon_norm: f64,
    pub projection_scope: ProjectionScope,
    /// Hold `v_avg` constant in the gradient (default). When false, the
    /// analytic dependence of `v_avg` on `z_t` is differentiated too.
    pub detach_average_velocity: bool,
    /// Build the source representation with the source class and CFG instead
    /// of the empty condition.
    pub source_cfg: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            beta: 1.0,
            lr: 0.003,
            k_opt: 3,
            t_opt: 10,
            source_rep: SourceRep::LatentPrediction,
            diff_mode: DiffMode::AllPairs,
            gamma: 0.1,
            epsilon_norm: 1e-8,
            projection_scope: ProjectionScope::Global,
            detach_average_velocity: true,
            source_cfg: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config("alpha and beta must be finite and non-negative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.k_opt == 0 {
            return Err(Error::Config("k_opt must be at least 1".into()));
        }
        if self.t_opt > steps {
            return Err(Error::Config(format!("t_opt = {} exceeds the {steps} denoising steps", self.t_opt)));
        }
        self.regularizer().validate()
    }

    pub fn regularizer(&self) -> RegularizerConfig {
        RegularizerConfig { gamma: self.gamma, epsilon_norm: self.epsilon_norm, scope: self.projection_scope }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, diff_mode: self.diff_mode }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub diff_mode: DiffMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceMotionRep {
    pub mode: SourceRep,
    pub payload: LatentTensor,
    /// Frame differences of the payload, present when `beta > 0`.
    pub diff: Option<LatentTensor>,
}

impl SourceMotionRep {
    pub fn new(mode: SourceRep, payload: LatentTensor, diff: Option<DiffMode>) -> Result<Self> {
        let diff = diff.map(|m| frame_diff(&payload, m)).transpose()?;
        Ok(Self { mode, payload, diff })
    }
}

/// `(1−t)·z_src0 + t·ε` with fresh `ε ~ N(0, I)`.
pub fn forward_noise(z_src0: &LatentTensor, t: f64, rng: &mut SeededRng) -> Result<LatentTensor> {
    let eps = sample_gaussian(z_src0.shape(), rng);
    lerp_path(z_src0, &eps, t)
}

/// Source-side motion representation at noise level `t`.
///
/// Every mode except [`SourceRep::CleanLatent`] draws fresh noise and makes
/// exactly one `field.eval` (or one CFG query when `cfg_scale` is set).
#[allow(clippy::too_many_arguments)]
pub fn source_representation(
    field: &dyn VelocityField,
    z_src0: &LatentTensor,
    t: f64,
    dt: f64,
    mode: SourceRep,
    condition: Condition,
    cfg_scale: Option<f64>,
    diff: Option<DiffMode>,
    rng: &mut SeededRng,
) -> Result<SourceMotionRep> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("t = {t} outside (0, 1]")));
    }
    let payload = match mode {
        SourceRep::CleanLatent => z_src0.clone(),
        _ => {
            let z_t = forward_noise(z_src0, t, rng)?;
            let v = target_velocity(field, &z_t, t, condition, cfg_scale)?;
            match mode {
                SourceRep::LatentPrediction => z_t.lin_comb(1.0, &v, -t)?,
                SourceRep::Velocity => v,
                SourceRep::DenoisedLatent => z_t.lin_comb(1.0, &v, -dt)?,
                SourceRep::CleanLatent => unreachable!(),
            }
        }
    };
    SourceMotionRep::new(mode, payload, diff)
}

/// Ordered pairs `(i, j)`, `i ≠ j`, in slab order.
fn pair_order(frames: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..frames).flat_map(move |i| (0..frames).filter(move |&j| j != i).map(move |j| (i, j)))
}

/// Frame differences packed as a tensor whose "frames" are the slabs.
pub fn frame_diff(z: &LatentTensor, mode: DiffMode) -> Result<LatentTensor> {
    let s = z.shape();
    if s.frames < 2 {
        return Err(Error::InvalidShape(format!("frame differences need >= 2 frames, got {}", s.frames)));
    }
    let pairs: Vec<(usize, usize)> = match mode {
        DiffMode::AllPairs => pair_order(s.frames).collect(),
        DiffMode::Adjacent => (0..s.frames - 1).map(|i| (i + 1, i)).collect(),
    };
    let out_shape = Shape::new(pairs.len(), s.height, s.width, s.channels)?;
    let values = pairs.iter().flat_map(|&(i, j)| {
        z.frame(i).iter().zip(z.frame(j)).map(|(&a, &b)| a as f64 - b as f64)
    });
    LatentTensor::checked(out_shape, values, "frame_diff")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// `α·L_LA + β·L_DA`.
    pub total: f64,
    /// Weighted latent-alignment term `α‖ŝ − ẑ‖²`.
    pub la: f64,
    /// Weighted difference-alignment term `β‖Δŝ − Δẑ‖²`.
    pub da: f64,
    /// Unweighted `‖ŝ − ẑ‖²`.
    pub la_raw: f64,
    /// Unweighted `‖Δŝ − Δẑ‖²`.
    pub da_raw: f64,
}

fn sq_dist(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum())
}

/// Sum-of-squares flow-guidance loss.
pub fn guidance_loss(rep_src: &SourceMotionRep, rep_tgt: &LatentTensor, weights: LossWeights) -> Result<LossParts> {
    let la_raw = sq_dist(&rep_src.payload, rep_tgt)?;
    let da_raw = if weights.beta > 0.0 {
        let src = match &rep_src.diff {
            Some(d) => d.clone(),
            None => frame_diff(&rep_src.payload, weights.diff_mode)?,
        };
        sq_dist(&src, &frame_diff(rep_tgt, weights.diff_mode)?)?
    } else {
        0.0
    };
    let (la, da) = (weights.alpha * la_raw, weights.beta * da_raw);
    Ok(LossParts { total: la + da, la, da, la_raw, da_raw })
}

/// `∂L/∂rep_tgt` in closed form.
pub fn representation_gradient(
    rep_tgt: &LatentTensor,
    rep_src: &LatentTensor,
    weights: LossWeights,
) -> Result<LatentTensor> {
    rep_tgt.ensure_same_shape(rep_src)?;
    let s = rep_tgt.shape();
    let n = s.frame_len();
    let e: Vec<f64> = rep_tgt.data().iter().zip(rep_src.data()).map(|(&a, &b)| a as f64 - b as f64).collect();
    let mut g: Vec<f64> = e.iter().map(|x| 2.0 * weights.alpha * x).collect();
    if weights.beta > 0.0 {
        if s.frames < 2 {
            return Err(Error::InvalidShape("difference alignment needs >= 2 frames".into()));
        }
        let f = s.frames;
        match weights.diff_mode {
            DiffMode::AllPairs => {
                // 4β·(F·e_k − Σ_j e_j)
                let mut total = vec![0.0; n];
                for k in 0..f {
                    for p in 0..n {
                        total[p] += e[k * n + p];
                    }
                }
                for k in 0..f {
                    for p in 0..n {
                        g[k * n + p] += 4.0 * weights.beta * (f as f64 * e[k * n + p] - total[p]);
                    }
                }
            }
            DiffMode::Adjacent => {
                for k in 0..f {
                    for p in 0..n {
                        let mut acc = 0.0;
                        if k > 0 {
                            acc += e[k * n + p] - e[(k - 1) * n + p];
                        }
                        if k + 1 < f {
                            acc -= e[(k + 1) * n + p] - e[k * n + p];
                        }
                        g[k * n + p] += 2.0 * weights.beta * acc;
                    }
                }
            }
        }
    }
    LatentTensor::checked(s, g.into_iter(), "representation_gradient")
}

/// Gradient of the loss w.r.t. `z_t` with `v_reg` frozen, where the target
/// representation is `z_t − horizon·v_reg` (`horizon = t` for the latent
/// prediction, `dt` for the denoised latent, `0` for the clean latent).
pub fn guidance_gradient(
    z_t: &LatentTensor,
    horizon: f64,
    v_reg: &LatentTensor,
    rep_src: &SourceMotionRep,
    weights: LossWeights,
) -> Result<LatentTensor> {
    if rep_src.mode == SourceRep::Velocity {
        return Err(Error::ModeMismatch("velocity representation needs guidance_gradient_velocity_mode".into()));
    }
    let pred = z_t.lin_comb(1.0, v_reg, -horizon)?;
    representation_gradient(&pred, &rep_src.payload, weights)
}

/// Vector-Jacobian product of the target-branch velocity, expanded for CFG.
pub fn target_vjp(
    field: &dyn VelocityField,
    z: &LatentTensor,
    t: f64,
    condition: Condition,
    cfg_scale: Option<f64>,
    u: &LatentTensor,
) -> Result<LatentTensor> {
    match cfg_scale {
        Some(s) => {
            let g_cond = field.vjp(z, t, condition, u)?;
            let g_empty = field.vjp(z, t, Condition::Empty, u)?;
            g_empty.lin_comb(1.0 - s, &g_cond, s)
        }
        None => field.vjp(z, t, condition, u),
    }
}

/// Gradient when the representation is the velocity itself; differentiates
/// through the field with an explicit vjp.
#[allow(clippy::too_many_arguments)]
pub fn guidance_gradient_velocity_mode(
    field: &dyn VelocityField,
    z_t: &LatentTensor,
    t: f64,
    condition: Condition,
    cfg_scale: Option<f64>,
    v: &LatentTensor,
    rep_src: &SourceMotionRep,
    weights: LossWeights,
) -> Result<LatentTensor> {
    let g_v = representation_gradient(v, &rep_src.payload, weights)?;
    target_vjp(field, z_t, t, condition, cfg_scale, &g_v)
}

/// Adam moments for one guided denoising step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState(Adam);

impl AdamState {
    pub fn new(shape: Shape) -> Self {
        Self(Adam::new(shape.numel()))
    }

    pub fn step(&self) -> u64 {
        self.0.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.0.m, &self.0.v)
    }
}

pub fn adam_step(z_t: &LatentTensor, grad: &LatentTensor, state: &mut AdamState, lr: f64) -> Result<LatentTensor> {
    z_t.ensure_same_shape(grad)?;
    if state.0.m.len() != z_t.len() {
        return Err(Error::InvalidShape("optimizer state does not match the latent".into()));
    }
    let mut data = z_t.data().to_vec();
    state.0.update(&mut data, grad.data(), lr);
    LatentTensor::from_vec(z_t.shape(), data)
}

/// Scalars logged for one inner optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerRecord {
    pub denoise_step: usize,
    pub t: f64,
    pub inner_step: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_LA")]
    pub loss_la: f64,
    #[serde(rename = "L_DA")]
    pub loss_da: f64,
    pub grad_norm: f64,
    /// Cumulative target-branch field evals when the record was taken.
    pub evals: u64,
}

/// Where guided target queries go.
#[derive(Clone, Copy)]
pub struct TargetBranch<'a> {
    pub field: &'a dyn VelocityField,
    pub condition: Condition,
    pub cfg_scale: Option<f64>,
}

impl TargetBranch<'_> {
    pub fn velocity(&self, z: &LatentTensor, t: f64) -> Result<LatentTensor> {
        target_velocity(self.field, z, t, self.condition, self.cfg_scale)
    }
}

/// Target representation from a velocity already evaluated at `z_t`.
pub struct TargetRep {
    pub rep: LatentTensor,
    pub horizon: f64,
    pub regulated: Option<Regulated>,
}

pub fn target_representation(
    z_t: &LatentTensor,
    v_t: &LatentTensor,
    t: f64,
    dt: f64,
    z1: &LatentTensor,
    mode: SourceRep,
    config: &GuidanceConfig,
) -> Result<TargetRep> {
    let horizon = match mode {
        SourceRep::LatentPrediction | SourceRep::CleanLatent => t,
        SourceRep::DenoisedLatent => dt,
        SourceRep::Velocity => return Ok(TargetRep { rep: v_t.clone(), horizon: 0.0, regulated: None }),
    };
    let r = regulate_velocity(z_t, z1, v_t, t, horizon, &config.regularizer())?;
    Ok(TargetRep { rep: r.z0_hat.clone(), horizon, regulated: Some(r) })
}

/// Chain rule through `ẑ = z − h·(p(v_avg(z)) + γ·(v − p(v_avg(z))))` with `v`
/// frozen, where `p` is the projection onto `v_avg = (z − z₁)/(t − 1)`.
fn through_average_velocity(
    g: &LatentTensor,
    v_t: &LatentTensor,
    t: f64,
    horizon: f64,
    gamma: f64,
    regulated: &Regulated,
) -> Result<LatentTensor> {
    let Some((v_avg, d)) = &regulated.average else {
        return Ok(g.clone());
    };
    let k = horizon * (1.0 - gamma) / (t - 1.0);
    let shape = g.shape();
    let groups = d.coefficients.len();
    let len = g.len() / groups;
    let mut out = Vec::with_capacity(g.len());
    for (idx, &c) in d.coefficients.iter().enumerate() {
        let range = idx * len..(idx + 1) * len;
        let (gs, vs, a) = (&g.data()[range.clone()], &v_t.data()[range.clone()], &v_avg.data()[range]);
        if c.is_nan() {
            out.extend(gs.iter().map(|&x| x as f64));
            continue;
        }
        let a_sq: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum();
        let a_g: f64 = a.iter().zip(gs).map(|(&x, &y)| x as f64 * y as f64).sum();
        for i in 0..len {
            let (gi, vi, ai) = (gs[i] as f64, vs[i] as f64, a[i] as f64);
            let jt = (vi - 2.0 * c * ai) * a_g / a_sq + c * gi;
            out.push(gi - k * jt);
        }
    }
    LatentTensor::checked(shape, out.into_iter(), "through_average_velocity")
}

/// Result of one guided denoising step's inner optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimized {
    pub z: LatentTensor,
    pub records: Vec<InnerRecord>,
    /// Regulated velocity from the last inner step.
    pub v_reg: Option<LatentTensor>,
}

/// Runs `k_opt` Adam steps on `z_t` with a fresh optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn optimize_latent(
    z_t: &LatentTensor,
    t: f64,
    dt: f64,
    z1: &LatentTensor,
    target: &TargetBranch<'_>,
    rep_src: &SourceMotionRep,
    config: &GuidanceConfig,
    denoise_step: usize,
) -> Result<Optimized> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("t = {t} outside (0, 1]")));
    }
    let weights = config.weights();
    let mut state = AdamState::new(z_t.shape());
    let mut z = z_t.clone();
    let mut records = Vec::with_capacity(config.k_opt);
    let mut last_v_reg = None;
    for inner in 0..config.k_opt {
        let v = target.velocity(&z, t)?;
        let tr = target_representation(&z, &v, t, dt, z1, rep_src.mode, config)?;
        let loss = guidance_loss(rep_src, &tr.rep, weights)?;
        let grad = match &tr.regulated {
            None => guidance_gradient_velocity_mode(
                target.field,
                &z,
                t,
                target.condition,
                target.cfg_scale,
                &v,
                rep_src,
                weights,
            )?,
            Some(reg) => {
                let g = representation_gradient(&tr.rep, &rep_src.payload, weights)?;
                if config.detach_average_velocity {
                    g
                } else {
                    through_average_velocity(&g, &v, t, tr.horizon, config.gamma, reg)?
                }
            }
        };
        records.push(InnerRecord {
            denoise_step,
            t,
            inner_step: inner,
            loss: loss.total,
            loss_la: loss.la,
            loss_da: loss.da,
            grad_norm: grad.norm(),
            evals: target.field.eval_count(),
        });
        last_v_reg = tr.regulated.map(|r| r.v_reg);
        z = adam_step(&z, &grad, &mut state, config.lr)?;
    }
    Ok(Optimized { z, records, v_reg: last_v_reg })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::field::OracleField;
    use crate::toy_world::{AppearanceClass, Codec, Dataset, DatasetItem, ShapeKind, Trajectory};

    fn scalars(values: &[f32]) -> LatentTensor {
        let shape = Shape::new(values.len(), 1, 1, 1).unwrap();
        LatentTensor::from_vec(shape, values.to_vec()).unwrap()
    }

    fn rep(mode: SourceRep, payload: LatentTensor) -> SourceMotionRep {
        SourceMotionRep::new(mode, payload, Some(DiffMode::AllPairs)).unwrap()
    }

    fn w(alpha: f64, beta: f64, diff_mode: DiffMode) -> LossWeights {
        LossWeights { alpha, beta, diff_mode }
    }

    fn single_item(x: LatentTensor) -> Arc<Dataset> {
        let class = AppearanceClass::new(0, ShapeKind::Disk, 1.0, 1.0).unwrap();
        let item = DatasetItem {
            latent: x,
            class_id: 0,
            trajectory: Trajectory::Linear { start: [0.0, 0.0], velocity: [0.0, 0.0] },
        };
        Arc::new(Dataset::from_items(vec![class], vec![item], Codec::Identity).unwrap())
    }

    #[test]
    fn frame_diff_examples() {
        let d = frame_diff(&scalars(&[1.0, 2.0, 4.0]), DiffMode::AllPairs).unwrap();
        assert_eq!(d.data(), &[-1.0, -3.0, 1.0, -2.0, 3.0, 2.0]);
        assert_eq!(d.shape().frames, 6);
        let d = frame_diff(&scalars(&[1.0, 2.0, 4.0]), DiffMode::Adjacent).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0]);
        let d = frame_diff(&scalars(&[0.5, 0.5, 0.5, 0.5]), DiffMode::AllPairs).unwrap();
        assert!(d.data().iter().all(|&x| x == 0.0));
        assert!(frame_diff(&scalars(&[1.0]), DiffMode::AllPairs).is_err());
    }

    #[test]
    fn loss_examples() {
        let l = guidance_loss(&rep(SourceRep::CleanLatent, scalars(&[1.0, 1.0])), &scalars(&[0.0, 0.0]), w(4.0, 1.0, DiffMode::AllPairs))
            .unwrap();
        assert_eq!((l.total, l.la, l.da), (8.0, 8.0, 0.0));
        let l = guidance_loss(&rep(SourceRep::CleanLatent, scalars(&[0.0, 0.0])), &scalars(&[0.0, 1.0]), w(0.0, 1.0, DiffMode::AllPairs))
            .unwrap();
        assert_eq!((l.total, l.da), (2.0, 2.0));
        let x = scalars(&[0.3, -0.2, 0.9]);
        let l = guidance_loss(&rep(SourceRep::CleanLatent, x.clone()), &x, w(4.0, 1.0, DiffMode::AllPairs)).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn gradient_examples() {
        let src = SourceMotionRep::new(SourceRep::CleanLatent, scalars(&[0.0]), None).unwrap();
        let g = guidance_gradient(&scalars(&[0.5]), 0.5, &scalars(&[0.0]), &src, w(1.0, 0.0, DiffMode::AllPairs)).unwrap();
        assert_eq!(g.data(), &[1.0]);
        let x = scalars(&[0.1, 0.2]);
        let src = rep(SourceRep::CleanLatent, x.clone());
        let g = guidance_gradient(&x, 0.3, &LatentTensor::zeros(x.shape()), &src, w(4.0, 1.0, DiffMode::AllPairs)).unwrap();
        assert_eq!(g.norm(), 0.0);
        let vsrc = rep(SourceRep::Velocity, x.clone());
        assert!(matches!(guidance_gradient(&x, 0.3, &x, &vsrc, w(1.0, 0.0, DiffMode::AllPairs)), Err(Error::ModeMismatch(_))));
    }

    #[test]
    fn adam_examples() {
        let z = scalars(&[1.0, -1.0]);
        let mut st = AdamState::new(z.shape());
        assert_eq!(adam_step(&z, &LatentTensor::zeros(z.shape()), &mut st, 0.003).unwrap(), z);
        let mut st = AdamState::new(z.shape());
        let g = scalars(&[0.5, 0.5]);
        assert_eq!(adam_step(&z, &g, &mut st, 0.0).unwrap(), z);
        assert_eq!(st.step(), 1);
        assert!(st.moments().0.iter().all(|&m| m != 0.0));
        let mut st = AdamState::new(z.shape());
        let out = adam_step(&z, &g, &mut st, 0.003).unwrap();
        assert!(((z.data()[0] - out.data()[0]) as f64 - 0.003).abs() < 1e-7);
    }

    #[test]
    fn source_representation_modes() {
        let shape = Shape::new(2, 2, 2, 1).unwrap();
        let x = sample_gaussian(shape, &mut SeededRng::new(1, 0));
        let field = OracleField::new(single_item(x.clone()));
        let mut rng = SeededRng::new(2, 0);
        for t in [1.0, 0.5, 0.02] {
            let r = source_representation(&field, &x, t, 0.02, SourceRep::LatentPrediction, Condition::Empty, None, None, &mut rng)
                .unwrap();
            assert!(r.payload.max_abs_diff(&x).unwrap() < 1e-5);
        }
        assert_eq!(field.eval_count(), 3);
        let r = source_representation(&field, &x, 0.5, 0.02, SourceRep::CleanLatent, Condition::Empty, None, None, &mut rng).unwrap();
        assert_eq!(r.payload, x);
        assert_eq!(field.eval_count(), 3);
    }

    #[test]
    fn denoised_latent_is_one_small_euler_step() {
        let shape = Shape::new(2, 2, 2, 1).unwrap();
        let x = sample_gaussian(shape, &mut SeededRng::new(1, 0));
        let field = OracleField::new(single_item(x.clone()));
        let mut a = SeededRng::new(5, 0);
        let mut b = a.clone();
        let r = source_representation(&field, &x, 1.0, 0.02, SourceRep::DenoisedLatent, Condition::Empty, None, None, &mut a).unwrap();
        let z1 = forward_noise(&x, 1.0, &mut b).unwrap();
        let v = field.eval(&z1, 1.0, Condition::Empty).unwrap();
        let ratio = r.payload.sub(&z1).unwrap().norm() / v.norm();
        assert!((ratio - 0.02).abs() < 1e-6);
    }

    #[test]
    fn velocity_mode_gradient_on_single_item() {
        let shape = Shape::new(2, 1, 2, 1).unwrap();
        let x = sample_gaussian(shape, &mut SeededRng::new(1, 0));
        let field = OracleField::new(single_item(x));
        let z = sample_gaussian(shape, &mut SeededRng::new(2, 0));
        let t = 0.4;
        let v = field.eval(&z, t, Condition::Class(0)).unwrap();
        let vsrc = sample_gaussian(shape, &mut SeededRng::new(3, 0));
        let src = SourceMotionRep::new(SourceRep::Velocity, vsrc.clone(), None).unwrap();
        let g = guidance_gradient_velocity_mode(&field, &z, t, Condition::Class(0), None, &v, &src, w(2.0, 0.0, DiffMode::AllPairs))
            .unwrap();
        let expect = vsrc.sub(&v).unwrap().scale(-2.0 * 2.0 / t).unwrap();
        assert!(g.max_abs_diff(&expect).unwrap() < 1e-5);
        let same = SourceMotionRep::new(SourceRep::Velocity, v.clone(), None).unwrap();
        let g = guidance_gradient_velocity_mode(&field, &z, t, Condition::Class(0), None, &v, &same, w(2.0, 0.0, DiffMode::AllPairs))
            .unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn zero_inner_steps_leave_latent_alone() {
        let shape = Shape::new(2, 2, 2, 1).unwrap();
        let x = sample_gaussian(shape, &mut SeededRng::new(1, 0));
        let field = OracleField::new(single_item(x.clone()));
        let z = sample_gaussian(shape, &mut SeededRng::new(2, 0));
        let cfg = GuidanceConfig { k_opt: 0, ..Default::default() };
        let target = TargetBranch { field: &field, condition: Condition::Class(0), cfg_scale: None };
        let src = rep(SourceRep::CleanLatent, x);
        let out = optimize_latent(&z, 0.5, 0.02, &z, &target, &src, &cfg, 0).unwrap();
        assert_eq!(out.z, z);
        assert_eq!(field.eval_count(), 0);
    }

    #[test]
    fn self_transfer_is_a_fixed_point() {
        let shape = Shape::new(3, 2, 2, 1).unwrap();
        let x = sample_gaussian(shape, &mut SeededRng::new(1, 0));
        let field = OracleField::new(single_item(x.clone()));
        // target state shares the source's noise draw
        let mut rng = SeededRng::new(2, 0);
        let z1 = sample_gaussian(shape, &mut rng.clone());
        let src = source_representation(
            &field,
            &x,
            1.0,
            0.02,
            SourceRep::LatentPrediction,
            Condition::Empty,
            None,
            Some(DiffMode::AllPairs),
            &mut rng,
        )
        .unwrap();
        let cfg = GuidanceConfig::default();
        let target = TargetBranch { field: &field, condition: Condition::Class(0), cfg_scale: None };
        let out = optimize_latent(&z1, 1.0, 0.02, &z1, &target, &src, &cfg, 0).unwrap();
        assert_eq!(out.records[0].loss, 0.0);
        assert!(out.z.max_abs_diff(&z1).unwrap() < 1e-6);
        assert_eq!(field.eval_count(), 1 + 3);
    }

    #[test]
    fn inner_loop_decreases_loss_on_clean_target() {
        let shape = Shape::new(4, 4, 4, 1).unwrap();
        let mut strict = 0;
        for seed in 0..100u64 {
            let x = sample_gaussian(shape, &mut SeededRng::new(seed, 10));
            let field = OracleField::new(single_item(x.clone()));
            let z = sample_gaussian(shape, &mut SeededRng::new(seed, 11));
            let z1 = sample_gaussian(shape, &mut SeededRng::new(seed, 12));
            let target = TargetBranch { field: &field, condition: Condition::Class(0), cfg_scale: None };
            let src = rep(SourceRep::CleanLatent, x);
            let cfg = GuidanceConfig::default();
            let out = optimize_latent(&z, 0.5, 0.02, &z1, &target, &src, &cfg, 0).unwrap();
            let l: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
            if l.windows(2).all(|p| p[1] < p[0]) {
                strict += 1;
            }
        }
        assert!(strict >= 99, "strict decrease in {strict}/100 seeds");
    }

    /// Independent f64 implementation of the loss on plain vectors.
    fn loss_f64(pred: &[f64], src: &[f64], frames: usize, weights: LossWeights) -> f64 {
        let n = pred.len() / frames;
        let la: f64 = pred.iter().zip(src).map(|(a, b)| (a - b).powi(2)).sum();
        let pairs: Vec<(usize, usize)> = match weights.diff_mode {
            DiffMode::AllPairs => (0..frames).flat_map(|i| (0..frames).filter(move |&j| j != i).map(move |j| (i, j))).collect(),
            DiffMode::Adjacent => (0..frames - 1).map(|i| (i + 1, i)).collect(),
        };
        let mut da = 0.0;
        for (i, j) in pairs {
            for p in 0..n {
                let dp = pred[i * n + p] - pred[j * n + p];
                let ds = src[i * n + p] - src[j * n + p];
                da += (dp - ds).powi(2);
            }
        }
        weights.alpha * la + weights.beta * da
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = Shape::new(4, 4, 4, 1).unwrap();
        let h = 1e-4;
        for seed in 0..12u64 {
            let mut rng = SeededRng::new(seed, 20);
            let z = sample_gaussian(shape, &mut rng);
            let v = sample_gaussian(shape, &mut rng);
            let s = sample_gaussian(shape, &mut rng);
            let t = rng.uniform(0.05, 1.0);
            for (a, b) in [(4.0, 1.0), (1.0, 1.0), (0.0, 1.0)] {
                for mode in [DiffMode::AllPairs, DiffMode::Adjacent] {
                    let weights = w(a, b, mode);
                    let src = SourceMotionRep::new(SourceRep::LatentPrediction, s.clone(), Some(mode)).unwrap();
                    let g = guidance_gradient(&z, t, &v, &src, weights).unwrap();
                    let zf: Vec<f64> = z.data().iter().map(|&x| x as f64).collect();
                    let vf: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
                    let sf: Vec<f64> = s.data().iter().map(|&x| x as f64).collect();
                    let eval = |zz: &[f64]| {
                        let pred: Vec<f64> = zz.iter().zip(&vf).map(|(z, v)| z - t * v).collect();
                        loss_f64(&pred, &sf, 4, weights)
                    };
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for i in 0..zf.len() {
                        let mut p = zf.clone();
                        p[i] += h;
                        let mut m = zf.clone();
                        m[i] -= h;
                        let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                        num += (fd - g.data()[i] as f64).powi(2);
                        den += fd * fd;
                    }
                    assert!((num / den).sqrt() < 1e-4, "seed {seed} {a}:{b} {mode:?}");
                }
            }
        }
    }

    #[test]
    fn gradient_through_average_velocity_matches_finite_differences() {
        let shape = Shape::new(3, 2, 2, 1).unwrap();
        let (t, gamma, h) = (0.6, 0.1, 1e-5);
        for scope in [ProjectionScope::Global, ProjectionScope::PerFrame] {
            let mut rng = SeededRng::new(7, 30);
            let z = sample_gaussian(shape, &mut rng);
            let z1 = sample_gaussian(shape, &mut rng);
            let v = sample_gaussian(shape, &mut rng);
            let s = sample_gaussian(shape, &mut rng);
            let weights = w(4.0, 1.0, DiffMode::AllPairs);
            let cfg = GuidanceConfig { gamma, projection_scope: scope, ..Default::default() };
            let tr = target_representation(&z, &v, t, 0.02, &z1, SourceRep::LatentPrediction, &cfg).unwrap();
            let g0 = representation_gradient(&tr.rep, &s, weights).unwrap();
            let g = through_average_velocity(&g0, &v, t, t, gamma, tr.regulated.as_ref().unwrap()).unwrap();

            let (zf, z1f, vf, sf): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = (
                z.data().iter().map(|&x| x as f64).collect(),
                z1.data().iter().map(|&x| x as f64).collect(),
                v.data().iter().map(|&x| x as f64).collect(),
                s.data().iter().map(|&x| x as f64).collect(),
            );
            let groups = if scope == ProjectionScope::Global { 1 } else { 3 };
            let eval = |zz: &[f64]| {
                let len = zz.len() / groups;
                let mut pred = vec![0.0; zz.len()];
                for gi in 0..groups {
                    let r = gi * len..(gi + 1) * len;
                    let a: Vec<f64> = r.clone().map(|i| (zz[i] - z1f[i]) / (t - 1.0)).collect();
                    let c = r.clone().zip(&a).map(|(i, ai)| vf[i] * ai).sum::<f64>() / a.iter().map(|x| x * x).sum::<f64>();
                    for (k, i) in r.enumerate() {
                        let proj = c * a[k];
                        pred[i] = zz[i] - t * (proj + gamma * (vf[i] - proj));
                    }
                }
                loss_f64(&pred, &sf, 3, weights)
            };
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..zf.len() {
                let mut p = zf.clone();
                p[i] += h;
                let mut m = zf.clone();
                m[i] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                num += (fd - g.data()[i] as f64).powi(2);
                den += fd * fd;
            }
            assert!((num / den).sqrt() < 1e-4, "{scope:?}: {}", (num / den).sqrt());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn loss_invariant_under_frame_permutation(seed in 0u64..1000, perm_seed in 0u64..1000) {
                let shape = Shape::new(4, 2, 2, 1).unwrap();
                let mut rng = SeededRng::new(seed, 40);
                let a = sample_gaussian(shape, &mut rng);
                let b = sample_gaussian(shape, &mut rng);
                let mut perm: Vec<usize> = (0..4).collect();
                let mut prng = SeededRng::new(perm_seed, 41);
                for i in (1..4).rev() {
                    perm.swap(i, prng.index(i + 1));
                }
                let weights = w(4.0, 1.0, DiffMode::AllPairs);
                let l1 = guidance_loss(&rep(SourceRep::CleanLatent, a.clone()), &b, weights).unwrap();
                let l2 = guidance_loss(
                    &rep(SourceRep::CleanLatent, a.permute_frames(&perm).unwrap()),
                    &b.permute_frames(&perm).unwrap(),
                    weights,
                ).unwrap();
                prop_assert!((l1.total - l2.total).abs() <= 1e-9 * (1.0 + l1.total));
                prop_assert!(l1.la >= 0.0 && l1.da >= 0.0);
                prop_assert!((l1.total - (4.0 * l1.la_raw + l1.da_raw)).abs() <= 1e-12 * (1.0 + l1.total));
            }
        }
    }
}
