mod args;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use flowmotion::artifacts::{
    default_dataset_specs, generate_dataset, import_dataset, inspect_trace, read_frames, write_unique, RunManifest,
    RunSpec,
};
use flowmotion::benchmark::{standard_benchmark, BenchmarkSpec, Difficulty};
use flowmotion::field::VelocityField;
use flowmotion::pipeline::{ablate, AblationGrid, AblationJob, RunMetrics, RunReport, SourceClip, TransferJob};
use flowmotion::toy_world::{AppearanceClass, Codec, Dataset};
use flowmotion::{Error, Result};

use args::{AblateArgs, BenchmarkSet, Cli, Command, GenDataArgs, InspectArgs, MetricsArgs, SampleArgs, TransferArgs};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Sample(a) => sample(a),
        Command::Transfer(a) => transfer(a),
        Command::Ablate(a) => run_ablation(a),
        Command::InspectTrace(a) => inspect(a),
        Command::Metrics(a) => metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numeric failures, 1 for I/O trouble other than a missing path, 2
/// for everything the user can fix by changing arguments or inputs.
fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_numeric() => 3,
        Error::Io(io) if io.kind() != std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let specs = default_dataset_specs(a.frames, a.height, a.width)?;
    let path = generate_dataset(&specs, a.frames, a.height, a.width, a.codec.into(), &a.out)?;
    print_json(&serde_json::json!({ "manifest": path, "items": specs.len() }))
}

fn load_dataset(path: &Path) -> Result<(PathBuf, flowmotion::artifacts::DatasetManifest, Dataset)> {
    let (manifest, dataset) = import_dataset(path)?;
    Ok((std::fs::canonicalize(path)?, manifest, dataset))
}

fn class_of(dataset: &Dataset, id: u32) -> Result<AppearanceClass> {
    dataset.class(id).cloned().ok_or_else(|| Error::Condition(format!("class {id} is not in the dataset")))
}

fn report_summary(out: &Path, report: &RunReport) -> Result<()> {
    print_json(&serde_json::json!({
        "run_dir": out,
        "metrics": report.metrics,
        "evals": report.evals,
        "wall_time_secs": report.wall_time.as_secs_f64(),
    }))
}

fn sample(a: SampleArgs) -> Result<()> {
    let sampler = a.sampler.config();
    sampler.validate()?;
    let (path, _, dataset) = load_dataset(&a.dataset)?;
    let target = class_of(&dataset, a.target_class)?;
    let manifest = RunManifest::new(path, a.field.spec(), RunSpec::Sample { target, sampler, seed: a.seed });
    let report = manifest.run_into(&a.out)?;
    report_summary(&a.out, &report)
}

fn transfer(a: TransferArgs) -> Result<()> {
    let sampler = a.sampler.config();
    let guidance = a.guidance.config(args::DEFAULT_LR);
    sampler.validate()?;
    guidance.validate(sampler.steps)?;
    let (path, manifest, dataset) = load_dataset(&a.dataset)?;
    let item = dataset
        .items()
        .get(a.source)
        .ok_or_else(|| Error::Config(format!("source index {} out of range ({} items)", a.source, dataset.len())))?;
    let source = SourceClip::single(
        class_of(&dataset, item.class_id)?,
        item.trajectory.clone(),
        manifest.frames,
        manifest.height,
        manifest.width,
    );
    let job = TransferJob {
        name: format!("item{}->class{}", a.source, a.target_class),
        source,
        target: class_of(&dataset, a.target_class)?,
        sampler,
        guidance,
        seed: a.seed,
    };
    let manifest = RunManifest::new(path, a.field.spec(), RunSpec::Transfer { job });
    let report = manifest.run_into(&a.out)?;
    report_summary(&a.out, &report)
}

fn run_ablation(a: AblateArgs) -> Result<()> {
    let sampler = a.sampler.config();
    let grid = AblationGrid {
        gammas: a.gammas.clone(),
        weights: a.weights.clone(),
        t_opts: a.t_opts.clone(),
        k_opts: a.k_opts.clone(),
        source_reps: a.source_reps.iter().map(|&s| s.into()).collect(),
        diff_modes: a.diff_modes.iter().map(|&d| d.into()).collect(),
    };
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty; pass at least one axis".into()));
    }
    let seeds: Vec<u64> = (a.seed_start..a.seed_start + a.seeds).collect();

    let (field, codec, jobs, base, source): (Box<dyn VelocityField>, Codec, Vec<AblationJob>, _, serde_json::Value) =
        match a.benchmark {
            Some(set) => {
                let spec = BenchmarkSpec::default();
                let base = a.guidance.config(spec.lr);
                let b = standard_benchmark(spec.clone())?;
                let jobs = match set {
                    BenchmarkSet::Easy => b.jobs(Difficulty::Easy),
                    BenchmarkSet::Hard => b.jobs(Difficulty::Hard),
                    BenchmarkSet::All => b.jobs.iter().map(|(_, j)| j.clone()).collect(),
                };
                let codec = b.dataset.codec();
                (Box::new(b.field), codec, jobs, base, serde_json::json!({ "benchmark": spec, "set": format!("{set:?}").to_lowercase() }))
            }
            None => {
                let path = a.dataset.as_ref().expect("clap requires --dataset without --benchmark");
                let (path, manifest, dataset) = load_dataset(path)?;
                if a.sources.is_empty() || a.target_classes.is_empty() {
                    return Err(Error::Config("dataset mode needs --sources and --target-classes".into()));
                }
                let mut jobs = Vec::new();
                for &t in &a.target_classes {
                    let target = class_of(&dataset, t)?;
                    for &s in &a.sources {
                        let item = dataset
                            .items()
                            .get(s)
                            .ok_or_else(|| Error::Config(format!("source index {s} out of range")))?;
                        let source = SourceClip::single(
                            class_of(&dataset, item.class_id)?,
                            item.trajectory.clone(),
                            manifest.frames,
                            manifest.height,
                            manifest.width,
                        );
                        jobs.push(AblationJob { name: format!("item{s}->class{t}"), source, target: target.clone() });
                    }
                }
                let codec = dataset.codec();
                let field_spec = a.field.spec();
                let field = field_spec.build(Arc::new(dataset))?;
                (field, codec, jobs, a.guidance.config(args::DEFAULT_LR), serde_json::json!({ "dataset": path, "field": field_spec }))
            }
        };
    sampler.validate()?;
    base.validate(sampler.steps)?;

    let result = ablate(field.as_ref(), codec, &sampler, &base, &grid, &jobs, &seeds, a.threads)?;
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    let stem = format!("ablation-{}", chrono::Local::now().format("%Y%m%dT%H%M%S"));
    let csv_path = write_unique(&a.out, &stem, "csv", &csv)?;
    let stem = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or(&stem).to_owned();
    let config = serde_json::json!({
        "source": source,
        "sampler": sampler,
        "base": base,
        "grid": grid,
        "jobs": jobs,
        "seeds": seeds,
        "csv": csv_path.file_name().and_then(|s| s.to_str()),
    });
    let json_path = write_unique(&a.out, &stem, "json", &serde_json::to_vec_pretty(&config)?)?;
    let failed: usize = result.aggregates.iter().map(|g| g.failed).sum();
    print_json(&serde_json::json!({
        "csv": csv_path,
        "config": json_path,
        "rows": result.rows.len(),
        "failed": failed,
    }))
}

fn inspect(a: InspectArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| a.run.join("inspect"));
    let written = inspect_trace(&a.run, &out)?;
    print_json(&serde_json::json!({ "out": out, "montages": written.len() }))
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let (_, dataset) = import_dataset(&a.dataset)?;
    let target = class_of(&dataset, a.target_class)?;
    let video = read_frames(&a.frames)?;
    let source = a.source_frames.as_ref().map(read_frames).transpose()?;
    let m = RunMetrics::compute(&video, &target, source.as_ref())?;
    let json = serde_json::to_value(m)?;
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_vec_pretty(&json)?)?;
    }
    print_json(&json)
}
