//! The standard toy benchmark: three appearance classes sharing one family
//! of motions, disk-rendered source clips, and square/ring targets.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::OracleField;
use crate::guidance::GuidanceConfig;
use crate::pipeline::{AblationJob, SourceClip};
use crate::toy_world::{build_dataset, AppearanceClass, Codec, Dataset, ShapeKind, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Single object, straight-line motion.
    Easy,
    /// Direction reversals or two objects.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Oracle data bandwidth.
    pub bandwidth: f64,
    /// Adam step size used for guided runs. The toy latent has far fewer
    /// content coordinates than a video-model latent, so the library default
    /// moves it too little.
    pub lr: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self { frames: 8, height: 32, width: 32, bandwidth: 0.3, lr: 0.03 }
    }
}

impl BenchmarkSpec {
    /// Library guidance defaults with the benchmark step size.
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig { lr: self.lr, ..Default::default() }
    }
}

pub struct StandardBenchmark {
    pub spec: BenchmarkSpec,
    pub dataset: Arc<Dataset>,
    pub field: OracleField,
    pub classes: Vec<AppearanceClass>,
    pub jobs: Vec<(Difficulty, AblationJob)>,
}

impl StandardBenchmark {
    pub fn jobs(&self, difficulty: Difficulty) -> Vec<AblationJob> {
        self.jobs.iter().filter(|(d, _)| *d == difficulty).map(|(_, j)| j.clone()).collect()
    }

    pub fn class(&self, id: u32) -> &AppearanceClass {
        &self.classes[id as usize]
    }
}

pub fn benchmark_classes() -> Result<Vec<AppearanceClass>> {
    Ok(vec![
        AppearanceClass::new(0, ShapeKind::Disk, 4.0, 1.0)?,
        AppearanceClass::new(1, ShapeKind::Square, 3.5, 1.0)?,
        AppearanceClass::new(2, ShapeKind::Ring, 4.5, 1.0)?,
    ])
}

/// Motions shared by every class: straight lines through the canvas centre in
/// eight directions at two speeds, plus four circles.
pub fn motion_family(spec: &BenchmarkSpec) -> Vec<Trajectory> {
    let c = [spec.width as f64 / 2.0, spec.height as f64 / 2.0];
    let mid = (spec.frames as f64 - 1.0) / 2.0;
    let mut out = Vec::new();
    for speed in [1.25, 2.25] {
        for d in 0..8 {
            let a = d as f64 * PI / 4.0;
            let v = [speed * a.cos(), speed * a.sin()];
            out.push(Trajectory::Linear { start: [c[0] - mid * v[0], c[1] - mid * v[1]], velocity: v });
        }
    }
    for (rate, phase) in [(0.6, 0.0), (-0.6, 0.0), (0.6, PI), (-0.6, PI)] {
        out.push(Trajectory::Circular { center: c, radius: 6.0, angular_rate: rate, phase });
    }
    out
}

fn source_jobs(spec: &BenchmarkSpec, classes: &[AppearanceClass]) -> Vec<(Difficulty, AblationJob)> {
    let disk = classes[0].clone();
    let clip = |objects: Vec<(AppearanceClass, Trajectory)>| SourceClip {
        objects,
        frames: spec.frames,
        height: spec.height,
        width: spec.width,
    };
    let family = motion_family(spec);
    let easy = [
        ("right", family[8].clone()),
        ("up", family[6].clone()),
        ("diag-down", family[9].clone()),
        ("left", family[4].clone()),
    ];
    let hard: [(&str, Vec<Trajectory>); 4] = [
        (
            "zigzag-x",
            vec![Trajectory::Sinusoidal {
                start: [16.0, 11.0],
                drift: [0.0, 1.4],
                amplitude: [7.0, 0.0],
                angular_rate: 1.3,
                phase: 0.0,
            }],
        ),
        (
            "bounce-y",
            vec![Trajectory::Sinusoidal {
                start: [12.0, 16.0],
                drift: [1.0, 0.0],
                amplitude: [0.0, 8.0],
                angular_rate: 1.1,
                phase: 0.5,
            }],
        ),
        (
            "pair-parallel",
            vec![
                Trajectory::Linear { start: [6.0, 7.0], velocity: [1.8, 0.6] },
                Trajectory::Linear { start: [9.0, 22.0], velocity: [1.8, 0.2] },
            ],
        ),
        (
            "pair-chase",
            vec![
                Trajectory::Circular { center: [16.0, 16.0], radius: 9.0, angular_rate: 0.5, phase: 0.0 },
                Trajectory::Linear { start: [8.0, 8.0], velocity: [2.0, 2.0] },
            ],
        ),
    ];
    let mut jobs = Vec::new();
    for target in &classes[1..] {
        for (name, t) in &easy {
            jobs.push((
                Difficulty::Easy,
                AblationJob {
                    name: format!("{name}->{:?}", target.shape).to_lowercase(),
                    source: clip(vec![(disk.clone(), t.clone())]),
                    target: target.clone(),
                },
            ));
        }
        for (name, ts) in &hard {
            jobs.push((
                Difficulty::Hard,
                AblationJob {
                    name: format!("{name}->{:?}", target.shape).to_lowercase(),
                    source: clip(ts.iter().map(|t| (disk.clone(), t.clone())).collect()),
                    target: target.clone(),
                },
            ));
        }
    }
    jobs
}

/// Builds the benchmark dataset, oracle and jobs.
pub fn standard_benchmark(spec: BenchmarkSpec) -> Result<StandardBenchmark> {
    let classes = benchmark_classes()?;
    let family = motion_family(&spec);
    let specs: Vec<(AppearanceClass, Trajectory)> =
        classes.iter().flat_map(|c| family.iter().map(move |t| (c.clone(), t.clone()))).collect();
    let dataset = Arc::new(build_dataset(&specs, spec.frames, spec.height, spec.width, Codec::Identity)?);
    let field = OracleField::with_params(dataset.clone(), OracleField::DEFAULT_T_MIN, spec.bandwidth)?;
    let jobs = source_jobs(&spec, &classes);
    for (_, j) in &jobs {
        j.source.video()?;
    }
    Ok(StandardBenchmark { spec, dataset, field, classes, jobs })
}
