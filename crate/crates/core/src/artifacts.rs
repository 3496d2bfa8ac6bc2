//! On-disk artifacts: datasets, run directories and their manifests.
//!
//! A dataset directory holds one FMLT latent per item, a PGM preview strip per
//! item and `manifest.json`. A run directory holds:
//!
//! ```text
//! manifest.json      everything needed to re-execute the run
//! output.fmlt        final latent
//! frames/            decoded frames, frame_000.pgm ...
//! montage.pgm        latent predictions of every recorded step, stacked
//! report.csv         one row per inner optimization step
//! metrics.json       metrics, eval counts, per-step guidance losses
//! trace/             per-step FMLT tensors and index.json
//! timing.json        wall time (the only non-reproducible file)
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{MlpField, OracleField, VelocityField};
use crate::fmlt;
use crate::pgm::GrayImage;
use crate::pipeline::{generate_baseline, transfer, EvalCounts, RunMetrics, RunReport, StepLoss, TransferJob};
use crate::sampler::{frame_strip, visualize_trace, SamplerConfig};
use crate::tensor::{LatentTensor, Shape};
use crate::toy_world::{build_dataset, AppearanceClass, Codec, Dataset, DatasetItem, ShapeKind, ToyVideo, Trajectory};

pub const MANIFEST_VERSION: u32 = 1;
pub const PGM_FORMAT: &str = "P5/255";

/// Writes every frame as `frame_000.pgm`, `frame_001.pgm`, ...
pub fn write_frames(video: &ToyVideo, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    (0..video.frames())
        .map(|k| {
            let path = dir.join(format!("frame_{k:03}.pgm"));
            GrayImage::from_frame(video, k).save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Reads `frame_*.pgm` files in name order back into a video.
pub fn read_frames(dir: impl AsRef<Path>) -> Result<ToyVideo> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("frame_") && n.ends_with(".pgm"))
    });
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no frame_*.pgm files in {}", dir.as_ref().display())));
    }
    let images = paths.iter().map(GrayImage::load).collect::<Result<Vec<_>>>()?;
    let (w, h) = (images[0].width(), images[0].height());
    if images.iter().any(|i| i.width() != w || i.height() != h) {
        return Err(Error::InvalidShape("frames differ in size".into()));
    }
    let pixels = images.iter().flat_map(|i| i.pixels().iter().copied()).collect();
    ToyVideo::new(images.len(), h, w, pixels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub file: String,
    pub class_id: u32,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub fmlt_version: u32,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub codec: Codec,
    pub classes: Vec<AppearanceClass>,
    pub items: Vec<ManifestItem>,
}

fn canvas(shape: Shape, codec: Codec) -> (usize, usize, usize) {
    match codec {
        Codec::Identity => (shape.frames, shape.height, shape.width),
        Codec::Pooled2x2 => (shape.frames, shape.height * 2, shape.width * 2),
    }
}

/// Two classes (disk, square) times four straight crossings of the canvas.
pub fn default_dataset_specs(frames: usize, height: usize, width: usize) -> Result<Vec<(AppearanceClass, Trajectory)>> {
    let classes =
        [AppearanceClass::new(0, ShapeKind::Disk, 4.0, 1.0)?, AppearanceClass::new(1, ShapeKind::Square, 3.5, 1.0)?];
    let margin = 6.0;
    let (w, h) = (width as f64, height as f64);
    if frames < 2 || w < 2.0 * margin + 1.0 || h < 2.0 * margin + 1.0 {
        return Err(Error::Geometry(format!(
            "default dataset needs >= 2 frames and a canvas of at least {0}x{0}, got {frames}x{height}x{width}",
            2.0 * margin + 1.0
        )));
    }
    let n = (frames - 1) as f64;
    let (sx, sy) = ((w - 2.0 * margin) / n, (h - 2.0 * margin) / n);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let trajectories = [
        Trajectory::Linear { start: [margin, cy], velocity: [sx, 0.0] },
        Trajectory::Linear { start: [w - margin, cy], velocity: [-sx, 0.0] },
        Trajectory::Linear { start: [cx, margin], velocity: [0.0, sy] },
        Trajectory::Linear { start: [margin, margin], velocity: [sx, sy] },
    ];
    let mut specs = Vec::new();
    for c in &classes {
        for t in &trajectories {
            t.validate(frames, height, width, c.extent(), 0.0)?;
            specs.push((c.clone(), t.clone()));
        }
    }
    Ok(specs)
}

/// Writes `dir/manifest.json`, `dir/item_000.fmlt`... and `dir/previews/`.
pub fn export_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("previews"))?;
    let (frames, height, width) = canvas(dataset.shape(), dataset.codec());
    let mut items = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.items().iter().enumerate() {
        let file = format!("item_{i:03}.fmlt");
        fmlt::save_latent(dir.join(&file), &item.latent)?;
        frame_strip(&item.latent, dataset.codec())?.save(dir.join("previews").join(format!("item_{i:03}.pgm")))?;
        items.push(ManifestItem { file, class_id: item.class_id, trajectory: item.trajectory.clone() });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        fmlt_version: fmlt::VERSION,
        frames,
        height,
        width,
        codec: dataset.codec(),
        classes: dataset.classes().to_vec(),
        items,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// Loads a dataset from its manifest; latent paths are relative to it.
pub fn import_dataset(manifest_path: impl AsRef<Path>) -> Result<(DatasetManifest, Dataset)> {
    let path = manifest_path.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported dataset manifest version {}", manifest.format_version)));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let items = manifest
        .items
        .iter()
        .map(|m| {
            Ok(DatasetItem {
                latent: fmlt::load_latent(base.join(&m.file))?,
                class_id: m.class_id,
                trajectory: m.trajectory.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::from_items(manifest.classes.clone(), items, manifest.codec)?;
    Ok((manifest, dataset))
}

/// Renders the specs and exports them in one go.
pub fn generate_dataset(
    specs: &[(AppearanceClass, Trajectory)],
    frames: usize,
    height: usize,
    width: usize,
    codec: Codec,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    export_dataset(&build_dataset(specs, frames, height, width, codec)?, dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec {
    Oracle { t_min: f64, bandwidth: f64 },
    Mlp { dir: PathBuf },
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Oracle { t_min: OracleField::DEFAULT_T_MIN, bandwidth: 0.0 }
    }
}

impl FieldSpec {
    pub fn build(&self, dataset: Arc<Dataset>) -> Result<Box<dyn VelocityField>> {
        Ok(match self {
            FieldSpec::Oracle { t_min, bandwidth } => Box::new(OracleField::with_params(dataset, *t_min, *bandwidth)?),
            FieldSpec::Mlp { dir } => Box::new(MlpField::load(dir)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunSpec {
    /// Unguided generation.
    Sample { target: AppearanceClass, sampler: SamplerConfig, seed: u64 },
    Transfer { job: TransferJob },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub fmlt_version: u32,
    pub pgm_format: String,
    /// Path of the dataset manifest the field is built from.
    pub dataset: PathBuf,
    pub field: FieldSpec,
    pub run: RunSpec,
}

impl RunManifest {
    pub fn new(dataset: PathBuf, field: FieldSpec, run: RunSpec) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            fmlt_version: fmlt::VERSION,
            pgm_format: PGM_FORMAT.into(),
            dataset,
            field,
            run,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: RunManifest = serde_json::from_slice(&fs::read(path)?)?;
        if m.format_version != MANIFEST_VERSION || m.fmlt_version != fmlt::VERSION {
            return Err(Error::Format(format!(
                "run manifest versions {}/{} are not supported",
                m.format_version, m.fmlt_version
            )));
        }
        Ok(m)
    }

    /// Runs the described generation with tensor capture on.
    pub fn execute(&self) -> Result<(RunReport, Codec)> {
        let (_, dataset) = import_dataset(&self.dataset)?;
        let (shape, codec) = (dataset.shape(), dataset.codec());
        let field = self.field.build(Arc::new(dataset))?;
        let report = match &self.run {
            RunSpec::Sample { target, sampler, seed } => {
                generate_baseline(field.as_ref(), codec, target, sampler, *seed, shape, true)?
            }
            RunSpec::Transfer { job } => transfer(field.as_ref(), codec, job, true)?,
        };
        Ok((report, codec))
    }

    /// Executes and writes the run directory.
    pub fn run_into(&self, dir: impl AsRef<Path>) -> Result<RunReport> {
        let (report, codec) = self.execute()?;
        write_run_dir(dir, self, &report, codec)?;
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummaryFile {
    pub metrics: RunMetrics,
    pub evals: EvalCounts,
    pub step_losses: Vec<StepLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub t: f64,
    pub cumulative_evals: u64,
    pub z: Option<String>,
    pub v: Option<String>,
    pub v_reg: Option<String>,
    pub z0_hat: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceIndex {
    pub codec: Codec,
    pub steps: Vec<TraceEntry>,
}

/// Writes the run directory layout described in the module docs.
pub fn write_run_dir(dir: impl AsRef<Path>, manifest: &RunManifest, report: &RunReport, codec: Codec) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    fmlt::save_latent(dir.join("output.fmlt"), &report.z0)?;
    write_frames(&report.video, dir.join("frames"))?;
    if report.trace.captures_tensors() {
        visualize_trace(&report.trace, codec)?.1.save(dir.join("montage.pgm"))?;
    }

    let mut csv = csv::Writer::from_path(dir.join("report.csv"))?;
    let records = report.inner_records();
    if records.is_empty() {
        csv.write_record(["denoise_step", "t", "inner_step", "L", "L_LA", "L_DA", "grad_norm", "evals"])?;
    }
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()?;

    let summary = RunSummaryFile { metrics: report.metrics, evals: report.evals, step_losses: report.step_losses.clone() };
    fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&summary)?)?;

    let trace_dir = dir.join("trace");
    fs::create_dir_all(&trace_dir)?;
    let mut steps = Vec::with_capacity(report.trace.len());
    for r in report.trace.records() {
        let save = |what: &str, z: &Option<LatentTensor>| -> Result<Option<String>> {
            z.as_ref()
                .map(|z| {
                    let name = format!("step_{:03}_{what}.fmlt", r.step);
                    fmlt::save_latent(trace_dir.join(&name), z)?;
                    Ok(name)
                })
                .transpose()
        };
        steps.push(TraceEntry {
            step: r.step,
            t: r.t,
            cumulative_evals: r.cumulative_evals,
            z: save("z", &r.z)?,
            v: save("v", &r.v)?,
            v_reg: save("v_reg", &r.v_reg)?,
            z0_hat: save("z0_hat", &r.z0_hat)?,
        });
    }
    fs::write(trace_dir.join("index.json"), serde_json::to_vec_pretty(&TraceIndex { codec, steps })?)?;

    fs::write(
        dir.join("timing.json"),
        serde_json::to_vec_pretty(&serde_json::json!({ "wall_time_secs": report.wall_time.as_secs_f64() }))?,
    )?;
    Ok(())
}

/// Reads a run's trace and writes one latent-prediction strip per recorded
/// step to `out/step_000.pgm`, ...
pub fn inspect_trace(run_dir: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let trace_dir = run_dir.as_ref().join("trace");
    let index_path = trace_dir.join("index.json");
    let index: TraceIndex = match fs::read(&index_path) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(e) if e.kind() == ErrorKind::NotFound => {
            return Err(Error::Config(format!("no trace found at {}", index_path.display())))
        }
        Err(e) => return Err(e.into()),
    };
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    index
        .steps
        .iter()
        .map(|e| {
            let file = e
                .z0_hat
                .as_ref()
                .ok_or_else(|| Error::Config(format!("trace step {} holds no latent prediction", e.step)))?;
            let z = fmlt::load_latent(trace_dir.join(file))?;
            let path = out.join(format!("step_{:03}.pgm", e.step));
            frame_strip(&z, index.codec)?.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Creates `dir/{stem}.{ext}`, or `{stem}-1`, `{stem}-2`, ... if taken. Never
/// opens an existing file.
pub fn create_unique(dir: impl AsRef<Path>, stem: &str, ext: &str) -> Result<(PathBuf, File)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for n in 0u32.. {
        let name = if n == 0 { format!("{stem}.{ext}") } else { format!("{stem}-{n}.{ext}") };
        let path = dir.join(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

/// Writes `bytes` to a fresh file from [`create_unique`].
pub fn write_unique(dir: impl AsRef<Path>, stem: &str, ext: &str, bytes: &[u8]) -> Result<PathBuf> {
    let (path, mut f) = create_unique(dir, stem, ext)?;
    f.write_all(bytes)?;
    Ok(path)
}
