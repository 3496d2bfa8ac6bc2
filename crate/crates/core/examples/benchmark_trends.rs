//! Prints guided-vs-unguided statistics on the standard toy benchmark.
//!
//! `cargo run --release --example benchmark_trends -- [seeds] [bandwidth] [lr]`

use flowmotion::benchmark::{standard_benchmark, BenchmarkSpec, Difficulty};
use flowmotion::guidance::SourceRep;
use flowmotion::metrics::sign_test;
use flowmotion::pipeline::{ablate, mean_std, AblationGrid, AblationResult, METRIC_COLUMNS};
use flowmotion::sampler::SamplerConfig;

fn column(res: &AblationResult, config_id: usize, col: usize) -> Vec<f64> {
    res.rows
        .iter()
        .filter(|r| r.config_id == config_id)
        .map(|r| match &r.outcome {
            Ok(s) => [
                s.metrics.motion_fidelity.unwrap_or(f64::NAN),
                s.metrics.trajectory_rmse.unwrap_or(f64::NAN),
                s.metrics.diff_similarity.unwrap_or(f64::NAN),
                s.metrics.appearance_score,
                s.metrics.temporal_consistency,
            ][col],
            Err(_) => f64::NAN,
        })
        .collect()
}

fn report(label: &str, res: &AblationResult, ids: &[usize]) {
    println!("== {label}");
    for &id in ids {
        let stats: Vec<String> = (0..5)
            .map(|c| {
                let (m, s) = mean_std(column(res, id, c).into_iter());
                format!("{}={m:.4}±{s:.4}", METRIC_COLUMNS[c])
            })
            .collect();
        println!("  cfg {id}: {}", stats.join(" "));
    }
    let (a, b) = (ids[0], *ids.last().unwrap());
    for (c, higher) in [(0, true), (3, false)] {
        let pairs: Vec<(f64, f64)> = column(res, b, c)
            .into_iter()
            .zip(column(res, a, c))
            .map(|(x, y)| if higher { (x, y) } else { (y, x) })
            .collect();
        let st = sign_test(&pairs);
        println!("  {} {}: wins {} losses {} ties {} p={:.3e}", METRIC_COLUMNS[c], if higher { "up" } else { "down" }, st.wins, st.losses, st.ties, st.p_value);
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut spec = BenchmarkSpec::default();
    let n_seeds: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(25);
    if let Some(s) = args.get(2) {
        spec.bandwidth = s.parse().unwrap();
    }
    if let Some(s) = args.get(3) {
        spec.lr = s.parse().unwrap();
    }
    let base = spec.guidance();
    let b = standard_benchmark(spec).unwrap();
    let sampler = SamplerConfig::default();
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let easy = b.jobs(Difficulty::Easy);
    let hard = b.jobs(Difficulty::Hard);

    for (label, jobs) in [("easy", &easy), ("hard", &hard)] {
        let grid = AblationGrid { t_opts: vec![0, 10], ..Default::default() };
        let res = ablate(&b.field, b.dataset.codec(), &sampler, &base, &grid, jobs, &seeds, None).unwrap();
        report(&format!("{label}: t_opt 0 vs 10"), &res, &[0, 1]);
        let rmse0 = column(&res, 0, 1);
        let rmse1 = column(&res, 1, 1);
        let strict = rmse1.iter().zip(&rmse0).filter(|(g, u)| g < u).count();
        println!("  strictly lower rmse: {strict}/{}", rmse0.len());
    }
    let grid = AblationGrid { t_opts: vec![0, 2, 5, 10], ..Default::default() };
    let res = ablate(&b.field, b.dataset.codec(), &sampler, &base, &grid, &easy, &seeds, None).unwrap();
    report("t_opt sweep (easy)", &res, &[0, 1, 2, 3]);
    let grid = AblationGrid { k_opts: vec![1, 3, 5], ..Default::default() };
    let res = ablate(&b.field, b.dataset.codec(), &sampler, &base, &grid, &easy, &seeds, None).unwrap();
    report("k_opt sweep (easy)", &res, &[0, 1, 2]);
    let grid = AblationGrid { source_reps: vec![SourceRep::LatentPrediction, SourceRep::CleanLatent], ..Default::default() };
    let res = ablate(&b.field, b.dataset.codec(), &sampler, &base, &grid, &hard, &seeds, None).unwrap();
    report("variant (hard): latent_prediction -> clean_latent", &res, &[0, 1]);
}
