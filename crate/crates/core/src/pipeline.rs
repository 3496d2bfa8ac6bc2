//! Guided sampling end to end, the unguided control arm, and parameter sweeps.

use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Counted, VelocityField};
use crate::guidance::{
    guidance_loss, optimize_latent, source_representation, target_representation, DiffMode, GuidanceConfig,
    InnerRecord, SourceRep, TargetBranch,
};
use crate::metrics::{
    appearance_score, centroid_track, diff_field_similarity, motion_fidelity, temporal_consistency, trajectory_rmse,
};
use crate::rng::{sample_gaussian, streams, SeededRng};
use crate::sampler::{euler_step, latent_prediction, numeric_context, sample, terminal_record, DenoiseTrace, SamplerConfig, StepRecord};
use crate::tensor::LatentTensor;
use crate::toy_world::{render_scene, AppearanceClass, Codec, Condition, ToyVideo, Trajectory};

/// A source clip described by its objects, so it can be re-rendered exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceClip {
    pub objects: Vec<(AppearanceClass, Trajectory)>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl SourceClip {
    pub fn single(class: AppearanceClass, trajectory: Trajectory, frames: usize, height: usize, width: usize) -> Self {
        Self { objects: vec![(class, trajectory)], frames, height, width }
    }

    pub fn video(&self) -> Result<ToyVideo> {
        if self.objects.is_empty() {
            return Err(Error::Config("source clip has no objects".into()));
        }
        render_scene(&self.objects, self.frames, self.height, self.width)
    }

    /// Class of the first object, used when the source pass is class-conditioned.
    pub fn class_id(&self) -> u32 {
        self.objects[0].0.id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferJob {
    pub name: String,
    pub source: SourceClip,
    pub target: AppearanceClass,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

impl TransferJob {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.guidance.validate(self.sampler.steps)
    }
}

/// Field evaluations made by one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Base-field evals made for the target (generated) video.
    pub target: u64,
    /// Base-field evals made to build source representations.
    pub source: u64,
    /// Vector-Jacobian products (velocity representation only).
    pub vjp: u64,
}

impl EvalCounts {
    /// `T·(1+cfg) + T_opt·K_opt·(1+cfg)` target evals and
    /// `T_opt·[needs source eval]·(1+source cfg)` source evals.
    pub fn expected(sampler: &SamplerConfig, guidance: &GuidanceConfig) -> Self {
        let per_query = sampler.evals_per_query();
        let (t, t_opt, k_opt) = (sampler.steps as u64, guidance.t_opt as u64, guidance.k_opt as u64);
        let source_per = if guidance.source_cfg { per_query } else { 1 };
        let source = if guidance.source_rep.needs_source_eval() { t_opt * source_per } else { 0 };
        let vjp = if guidance.source_rep == SourceRep::Velocity { t_opt * k_opt * per_query } else { 0 };
        Self { target: t * per_query + t_opt * k_opt * per_query, source, vjp }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Motion scores need a source clip; they are absent for unguided runs.
    pub motion_fidelity: Option<f64>,
    pub trajectory_rmse: Option<f64>,
    pub diff_similarity: Option<f64>,
    pub appearance_score: f64,
    pub temporal_consistency: f64,
}

impl RunMetrics {
    pub fn compute(video: &ToyVideo, target: &AppearanceClass, source: Option<&ToyVideo>) -> Result<Self> {
        let mut m = RunMetrics {
            appearance_score: appearance_score(video, target),
            temporal_consistency: temporal_consistency(video),
            ..Default::default()
        };
        if let Some(src) = source {
            let (a, b) = (centroid_track(src)?, centroid_track(video)?);
            m.motion_fidelity = Some(motion_fidelity(&a, &b)?);
            m.trajectory_rmse = Some(trajectory_rmse(&a, &b)?);
            m.diff_similarity = Some(diff_field_similarity(src, video)?);
        }
        Ok(m)
    }
}

/// Guidance loss before the first and after the last inner step of one
/// guided denoising step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub t: f64,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub z0: LatentTensor,
    pub video: ToyVideo,
    pub trace: DenoiseTrace,
    pub metrics: RunMetrics,
    pub evals: EvalCounts,
    pub step_losses: Vec<StepLoss>,
    pub wall_time: Duration,
}

impl RunReport {
    pub fn inner_records(&self) -> Vec<InnerRecord> {
        self.trace.inner_records().copied().collect()
    }
}

fn initial_noise(shape: crate::tensor::Shape, seed: u64) -> LatentTensor {
    sample_gaussian(shape, &mut SeededRng::new(seed, streams::INIT_NOISE))
}

/// Guided generation: the first `t_opt` denoising steps optimize `z_t`
/// against the source representation before their Euler update.
pub fn transfer(field: &dyn VelocityField, codec: Codec, job: &TransferJob, capture: bool) -> Result<RunReport> {
    let start = Instant::now();
    job.validate()?;
    let (sampler, g) = (&job.sampler, &job.guidance);
    let src_video = job.source.video()?;
    let z_src0 = codec.encode(&src_video)?;
    let shape = z_src0.shape();
    let grid = sampler.grid()?;
    let dt = grid.dt();

    let target_field = Counted::new(field);
    let source_field = Counted::new(field);
    let target = TargetBranch {
        field: &target_field,
        condition: Condition::Class(job.target.id),
        cfg_scale: sampler.cfg_scale,
    };
    let (src_condition, src_cfg) = if g.source_cfg {
        (Condition::Class(job.source.class_id()), sampler.cfg_scale)
    } else {
        (Condition::Empty, None)
    };
    let src_diff = (g.beta > 0.0).then_some(g.diff_mode);

    let z1 = initial_noise(shape, job.seed);
    let mut src_rng = SeededRng::new(job.seed, streams::SOURCE_NOISE);
    let mut trace = DenoiseTrace::new(capture);
    let mut step_losses = Vec::with_capacity(g.t_opt);
    let mut z = z1.clone();
    for k in 0..grid.steps() {
        let t = grid.t(k);
        let ctx = |e| numeric_context(e, k, t);
        let mut inner = Vec::new();
        let mut v_reg = None;
        let mut rep = None;
        if k < g.t_opt {
            let r = source_representation(&source_field, &z_src0, t, dt, g.source_rep, src_condition, src_cfg, src_diff, &mut src_rng)
                .map_err(ctx)?;
            let opt = optimize_latent(&z, t, dt, &z1, &target, &r, g, k).map_err(ctx)?;
            z = opt.z;
            inner = opt.records;
            v_reg = opt.v_reg;
            rep = Some(r);
        }
        let v = target.velocity(&z, t).map_err(ctx)?;
        if let Some(r) = &rep {
            let tr = target_representation(&z, &v, t, dt, &z1, g.source_rep, g).map_err(ctx)?;
            let after = guidance_loss(r, &tr.rep, g.weights()).map_err(ctx)?.total;
            step_losses.push(StepLoss { step: k, t, before: inner[0].loss, after });
        }
        let z0_hat = if capture { Some(latent_prediction(&z, &v, t).map_err(ctx)?) } else { None };
        let next = euler_step(&z, &v, dt).map_err(ctx)?;
        trace.push(StepRecord {
            step: k,
            t,
            z: Some(z),
            v: Some(v),
            v_reg,
            z0_hat,
            inner,
            cumulative_evals: target_field.eval_count(),
        });
        z = next;
    }
    trace.push(terminal_record(grid.steps(), &z, target_field.eval_count()));

    let evals = EvalCounts {
        target: target_field.eval_count(),
        source: source_field.eval_count(),
        vjp: target_field.vjp_count(),
    };
    assert_eq!(evals, EvalCounts::expected(sampler, g), "field-eval accounting drifted from the analytic count");

    let video = codec.decode(&z)?;
    let metrics = RunMetrics::compute(&video, &job.target, Some(&src_video))?;
    Ok(RunReport { z0: z, video, trace, metrics, evals, step_losses, wall_time: start.elapsed() })
}

/// Unguided control arm with the same initial noise as [`transfer`].
pub fn generate_baseline(
    field: &dyn VelocityField,
    codec: Codec,
    target: &AppearanceClass,
    sampler: &SamplerConfig,
    seed: u64,
    shape: crate::tensor::Shape,
    capture: bool,
) -> Result<RunReport> {
    let start = Instant::now();
    sampler.validate()?;
    let counted = Counted::new(field);
    let z1 = initial_noise(shape, seed);
    let (z0, trace) = sample(&counted, &z1, &sampler.grid()?, sampler.cfg_scale, Condition::Class(target.id), capture)?;
    let video = codec.decode(&z0)?;
    let metrics = RunMetrics::compute(&video, target, None)?;
    let evals = EvalCounts { target: counted.eval_count(), source: 0, vjp: 0 };
    Ok(RunReport { z0, video, trace, metrics, evals, step_losses: Vec::new(), wall_time: start.elapsed() })
}

/// Sweep axes; an empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub gammas: Vec<f64>,
    /// `(alpha, beta)` pairs.
    pub weights: Vec<(f64, f64)>,
    pub t_opts: Vec<usize>,
    pub k_opts: Vec<usize>,
    pub source_reps: Vec<SourceRep>,
    pub diff_modes: Vec<DiffMode>,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl AblationGrid {
    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
            && self.weights.is_empty()
            && self.t_opts.is_empty()
            && self.k_opts.is_empty()
            && self.source_reps.is_empty()
            && self.diff_modes.is_empty()
    }

    /// Cartesian product in a fixed axis order.
    pub fn configs(&self, base: &GuidanceConfig) -> Result<Vec<GuidanceConfig>> {
        if self.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        let mut out = Vec::new();
        for &gamma in &axis(&self.gammas, base.gamma) {
            for &(alpha, beta) in &axis(&self.weights, (base.alpha, base.beta)) {
                for &t_opt in &axis(&self.t_opts, base.t_opt) {
                    for &k_opt in &axis(&self.k_opts, base.k_opt) {
                        for &source_rep in &axis(&self.source_reps, base.source_rep) {
                            for &diff_mode in &axis(&self.diff_modes, base.diff_mode) {
                                out.push(GuidanceConfig {
                                    gamma,
                                    alpha,
                                    beta,
                                    t_opt,
                                    k_opt,
                                    source_rep,
                                    diff_mode,
                                    ..*base
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A named source/target pairing swept over configs and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationJob {
    pub name: String,
    pub source: SourceClip,
    pub target: AppearanceClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub metrics: RunMetrics,
    pub evals: EvalCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config_id: usize,
    pub config: GuidanceConfig,
    pub job: String,
    pub seed: u64,
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub config_id: usize,
    pub config: GuidanceConfig,
    pub succeeded: usize,
    pub failed: usize,
    /// `(mean, std)` per metric column, in [`METRIC_COLUMNS`] order.
    pub stats: Vec<(f64, f64)>,
}

pub const METRIC_COLUMNS: [&str; 5] =
    ["motion_fidelity", "trajectory_rmse", "diff_similarity", "appearance_score", "temporal_consistency"];

fn metric_values(m: &RunMetrics) -> [f64; 5] {
    [
        m.motion_fidelity.unwrap_or(f64::NAN),
        m.trajectory_rmse.unwrap_or(f64::NAN),
        m.diff_similarity.unwrap_or(f64::NAN),
        m.appearance_score,
        m.temporal_consistency,
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Runs every `(config, job, seed)` combination, in parallel when `threads`
/// allows. Row order is deterministic; failed runs are recorded, not fatal.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    field: &dyn VelocityField,
    codec: Codec,
    sampler: &SamplerConfig,
    base: &GuidanceConfig,
    grid: &AblationGrid,
    jobs: &[AblationJob],
    seeds: &[u64],
    threads: Option<usize>,
) -> Result<AblationResult> {
    let configs = grid.configs(base)?;
    if jobs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one job and one seed".into()));
    }
    let mut tasks = Vec::with_capacity(configs.len() * jobs.len() * seeds.len());
    for (ci, cfg) in configs.iter().enumerate() {
        for job in jobs {
            for &seed in seeds {
                tasks.push((ci, *cfg, job, seed));
            }
        }
    }
    let run = |&(ci, cfg, job, seed): &(usize, GuidanceConfig, &AblationJob, u64)| {
        let tj = TransferJob {
            name: job.name.clone(),
            source: job.source.clone(),
            target: job.target.clone(),
            sampler: *sampler,
            guidance: cfg,
            seed,
        };
        let outcome = transfer(field, codec, &tj, false)
            .map(|r| RunSummary { metrics: r.metrics, evals: r.evals })
            .map_err(|e| {
                log::warn!("run {} / config {ci} / seed {seed} failed: {e}", job.name);
                e.to_string()
            });
        AblationRow { config_id: ci, config: cfg, job: job.name.clone(), seed, outcome }
    };
    let rows: Vec<AblationRow> = match threads {
        Some(1) => tasks.iter().map(run).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| tasks.par_iter().map(run).collect()),
        None => tasks.par_iter().map(run).collect(),
    };

    let aggregates = configs
        .iter()
        .enumerate()
        .map(|(ci, cfg)| {
            let ok: Vec<[f64; 5]> = rows
                .iter()
                .filter(|r| r.config_id == ci)
                .filter_map(|r| r.outcome.as_ref().ok())
                .map(|s| metric_values(&s.metrics))
                .collect();
            let failed = rows.iter().filter(|r| r.config_id == ci && r.outcome.is_err()).count();
            let stats = (0..METRIC_COLUMNS.len()).map(|c| mean_std(ok.iter().map(|v| v[c]))).collect();
            Aggregate { config_id: ci, config: *cfg, succeeded: ok.len(), failed, stats }
        })
        .collect();
    Ok(AblationResult { rows, aggregates })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

const CONFIG_COLUMNS: [&str; 7] = ["gamma", "alpha", "beta", "t_opt", "k_opt", "source_rep", "diff_mode"];

fn config_fields(c: &GuidanceConfig) -> [String; 7] {
    [
        c.gamma.to_string(),
        c.alpha.to_string(),
        c.beta.to_string(),
        c.t_opt.to_string(),
        c.k_opt.to_string(),
        c.source_rep.as_str().to_string(),
        c.diff_mode.as_str().to_string(),
    ]
}

fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.6}")
    }
}

impl AblationResult {
    /// Per-run rows followed by `mean` and `std` rows per config.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["kind", "config_id"];
        header.extend(CONFIG_COLUMNS);
        header.extend(["job", "seed", "status", "n"]);
        header.extend(METRIC_COLUMNS);
        header.extend(["target_evals", "source_evals", "error"]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec!["run".to_string(), r.config_id.to_string()];
            rec.extend(config_fields(&r.config));
            rec.extend([r.job.clone(), r.seed.to_string()]);
            match &r.outcome {
                Ok(s) => {
                    rec.extend(["ok".into(), "1".into()]);
                    rec.extend(metric_values(&s.metrics).map(fmt_metric));
                    rec.extend([s.evals.target.to_string(), s.evals.source.to_string(), String::new()]);
                }
                Err(e) => {
                    rec.extend(["failed".into(), "1".into()]);
                    rec.extend(std::iter::repeat_n(String::new(), METRIC_COLUMNS.len() + 2));
                    rec.push(e.clone());
                }
            }
            w.write_record(&rec)?;
        }
        for a in &self.aggregates {
            for (kind, pick) in [("mean", 0usize), ("std", 1)] {
                let mut rec = vec![kind.to_string(), a.config_id.to_string()];
                rec.extend(config_fields(&a.config));
                rec.extend(["*".into(), String::new(), format!("{} failed", a.failed), a.succeeded.to_string()]);
                rec.extend(a.stats.iter().map(|s| fmt_metric(if pick == 0 { s.0 } else { s.1 })));
                rec.extend([String::new(), String::new(), String::new()]);
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
