//! Forward-Euler integration from `t = 1` to `t = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{cfg_velocity, VelocityField};
use crate::grid::TimeGrid;
use crate::guidance::InnerRecord;
use crate::pgm::GrayImage;
use crate::tensor::LatentTensor;
use crate::toy_world::{Codec, Condition};

/// `ẑ₀ = z_t − t·v`.
pub fn latent_prediction(z_t: &LatentTensor, v: &LatentTensor, t: f64) -> Result<LatentTensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    z_t.lin_comb(1.0, v, -t)
}

/// `z_{t−dt} = z_t − v·dt`.
pub fn euler_step(z_t: &LatentTensor, v: &LatentTensor, dt: f64) -> Result<LatentTensor> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt = {dt} must be positive")));
    }
    z_t.lin_comb(1.0, v, -dt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Classifier-free guidance scale; `None` evaluates the conditional field only.
    pub cfg_scale: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, cfg_scale: Some(6.0) }
    }
}

impl SamplerConfig {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.steps)
    }

    /// Field evaluations per target-branch velocity query.
    pub fn evals_per_query(&self) -> u64 {
        if self.cfg_scale.is_some() {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if let Some(s) = self.cfg_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("cfg scale {s} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Target-branch velocity, with CFG when configured.
pub fn target_velocity(
    field: &dyn VelocityField,
    z: &LatentTensor,
    t: f64,
    condition: Condition,
    cfg_scale: Option<f64>,
) -> Result<LatentTensor> {
    match cfg_scale {
        Some(s) => cfg_velocity(field, z, t, condition, s),
        None => field.eval(z, t, condition),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    /// State at the time of the Euler update (after any guidance).
    pub z: Option<LatentTensor>,
    /// Velocity used by the Euler update; absent for the terminal record.
    pub v: Option<LatentTensor>,
    /// Regulated velocity of the last inner optimization step, if guided.
    pub v_reg: Option<LatentTensor>,
    pub z0_hat: Option<LatentTensor>,
    pub inner: Vec<InnerRecord>,
    pub cumulative_evals: u64,
}

/// Append-only per-step log of a sampling run. When tensors are not
/// captured, records keep only scalars.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenoiseTrace {
    records: Vec<StepRecord>,
    capture_tensors: bool,
}

impl DenoiseTrace {
    pub fn new(capture_tensors: bool) -> Self {
        Self { records: Vec::new(), capture_tensors }
    }

    pub fn captures_tensors(&self) -> bool {
        self.capture_tensors
    }

    pub fn push(&mut self, mut record: StepRecord) {
        if !self.capture_tensors {
            record.z = None;
            record.v = None;
            record.v_reg = None;
            record.z0_hat = None;
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn inner_records(&self) -> impl Iterator<Item = &InnerRecord> {
        self.records.iter().flat_map(|r| r.inner.iter())
    }
}

/// Unguided sampling from `z1` over `grid`. Evaluates the field at `t = 1, …, dt`
/// and never at `t = 0`; the trace gets one record per step plus a terminal
/// record holding `z₀`.
pub fn sample(
    field: &dyn VelocityField,
    z1: &LatentTensor,
    grid: &TimeGrid,
    cfg_scale: Option<f64>,
    condition: Condition,
    capture: bool,
) -> Result<(LatentTensor, DenoiseTrace)> {
    let mut trace = DenoiseTrace::new(capture);
    let start = field.eval_count();
    let dt = grid.dt();
    let mut z = z1.clone();
    for k in 0..grid.steps() {
        let t = grid.t(k);
        let v = target_velocity(field, &z, t, condition, cfg_scale)
            .map_err(|e| numeric_context(e, k, t))?;
        let z0_hat = if capture { Some(latent_prediction(&z, &v, t)?) } else { None };
        let next = euler_step(&z, &v, dt).map_err(|e| numeric_context(e, k, t))?;
        trace.push(StepRecord {
            step: k,
            t,
            z: Some(z),
            v: Some(v),
            v_reg: None,
            z0_hat,
            inner: Vec::new(),
            cumulative_evals: field.eval_count() - start,
        });
        z = next;
    }
    trace.push(terminal_record(grid.steps(), &z, field.eval_count() - start));
    Ok((z, trace))
}

pub(crate) fn terminal_record(step: usize, z0: &LatentTensor, evals: u64) -> StepRecord {
    StepRecord {
        step,
        t: 0.0,
        z: Some(z0.clone()),
        v: None,
        v_reg: None,
        z0_hat: Some(z0.clone()),
        inner: Vec::new(),
        cumulative_evals: evals,
    }
}

pub(crate) fn numeric_context(e: Error, step: usize, t: f64) -> Error {
    match e {
        Error::NonFinite(what) => Error::Numeric { step, t, what },
        other => other,
    }
}

/// Separator intensity between montage tiles.
const SEPARATOR: f32 = 0.5;

/// Decodes one latent prediction into a strip of its frames, side by side
/// with 1-px separators.
pub fn frame_strip(z: &LatentTensor, codec: Codec) -> Result<GrayImage> {
    let video = codec.decode(z)?;
    let (f, h, w) = (video.frames(), video.height(), video.width());
    let width = f * w + (f - 1);
    let mut img = GrayImage::filled(width, h, SEPARATOR);
    for k in 0..f {
        for r in 0..h {
            for c in 0..w {
                img.set(k * (w + 1) + c, r, video.pixel(k, r, c));
            }
        }
    }
    Ok(img)
}

/// Per-record frame strips, plus all strips stacked vertically with 1-px
/// separators (`records·H + records − 1` rows).
pub fn visualize_trace(trace: &DenoiseTrace, codec: Codec) -> Result<(Vec<GrayImage>, GrayImage)> {
    if trace.is_empty() {
        return Err(Error::Config("cannot visualize an empty trace".into()));
    }
    let strips = trace
        .records()
        .iter()
        .map(|r| {
            let z = r.z0_hat.as_ref().ok_or_else(|| Error::Config("trace holds no tensors".into()))?;
            frame_strip(z, codec)
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = GrayImage::stack_vertical(&strips, SEPARATOR);
    Ok((strips, grid))
}
