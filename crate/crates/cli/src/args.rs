use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowmotion::artifacts::FieldSpec;
use flowmotion::field::OracleField;
use flowmotion::guidance::{DiffMode, GuidanceConfig, SourceRep};
use flowmotion::regularization::ProjectionScope;
use flowmotion::sampler::SamplerConfig;
use flowmotion::toy_world::Codec;

#[derive(Parser, Debug)]
#[command(name = "flowmotion", version, about = "Flow-guided motion transfer on synthetic toy videos")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the default 8-item dataset (disk and square, four crossings each).
    GenData(GenDataArgs),
    /// Unguided generation for one class.
    Sample(SampleArgs),
    /// Guided generation that copies the motion of a dataset item.
    Transfer(TransferArgs),
    /// Parameter sweep; writes a fresh timestamped CSV.
    Ablate(AblateArgs),
    /// Write one latent-prediction strip per recorded step of a run.
    InspectTrace(InspectArgs),
    /// Score a directory of frames.
    Metrics(MetricsArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum CodecArg {
    Identity,
    Pooled2x2,
}

impl From<CodecArg> for Codec {
    fn from(c: CodecArg) -> Self {
        match c {
            CodecArg::Identity => Codec::Identity,
            CodecArg::Pooled2x2 => Codec::Pooled2x2,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, value_enum, default_value_t = CodecArg::Identity)]
    pub codec: CodecArg,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum FieldKind {
    Oracle,
    Mlp,
}

#[derive(Args, Debug, Clone)]
pub struct FieldArgs {
    /// Velocity field: the closed-form oracle over the dataset, or a saved MLP.
    #[arg(long, value_enum, default_value_t = FieldKind::Oracle)]
    pub field: FieldKind,
    /// Oracle data bandwidth (Gaussian smoothing of each item).
    #[arg(long, default_value_t = 0.0)]
    pub bandwidth: f64,
    /// Oracle time floor.
    #[arg(long, default_value_t = OracleField::DEFAULT_T_MIN)]
    pub t_min: f64,
    /// Directory written by `MlpField::save`.
    #[arg(long, required_if_eq("field", "mlp"))]
    pub mlp_dir: Option<PathBuf>,
}

impl FieldArgs {
    pub fn spec(&self) -> FieldSpec {
        match self.field {
            FieldKind::Oracle => FieldSpec::Oracle { t_min: self.t_min, bandwidth: self.bandwidth },
            FieldKind::Mlp => FieldSpec::Mlp { dir: self.mlp_dir.clone().unwrap_or_default() },
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SamplerArgs {
    /// Euler steps T.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 6.0)]
    pub cfg: f64,
    /// Disable classifier-free guidance.
    #[arg(long)]
    pub no_cfg: bool,
}

impl SamplerArgs {
    pub fn config(&self) -> SamplerConfig {
        SamplerConfig { steps: self.steps, cfg_scale: (!self.no_cfg).then_some(self.cfg) }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum SourceRepArg {
    LatentPrediction,
    CleanLatent,
    Velocity,
    DenoisedLatent,
}

impl From<SourceRepArg> for SourceRep {
    fn from(s: SourceRepArg) -> Self {
        match s {
            SourceRepArg::LatentPrediction => SourceRep::LatentPrediction,
            SourceRepArg::CleanLatent => SourceRep::CleanLatent,
            SourceRepArg::Velocity => SourceRep::Velocity,
            SourceRepArg::DenoisedLatent => SourceRep::DenoisedLatent,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum DiffModeArg {
    AllPairs,
    Adjacent,
}

impl From<DiffModeArg> for DiffMode {
    fn from(d: DiffModeArg) -> Self {
        match d {
            DiffModeArg::AllPairs => DiffMode::AllPairs,
            DiffModeArg::Adjacent => DiffMode::Adjacent,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ScopeArg {
    Global,
    PerFrame,
}

#[derive(Args, Debug, Clone)]
pub struct GuidanceArgs {
    /// Guided denoising steps T_opt.
    #[arg(long, default_value_t = 10)]
    pub t_opt: usize,
    /// Adam steps per guided denoising step K_opt.
    #[arg(long, default_value_t = 3)]
    pub k_opt: usize,
    /// Adam step size [default: 0.003; the benchmark step size with --benchmark].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the latent-alignment term.
    #[arg(long, default_value_t = 4.0)]
    pub alpha: f64,
    /// Weight of the frame-difference term.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Decay applied to the component of the velocity orthogonal to the average velocity.
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Degenerate-direction threshold, per element.
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon_norm: f64,
    #[arg(long, value_enum, default_value_t = SourceRepArg::LatentPrediction)]
    pub source_rep: SourceRepArg,
    #[arg(long, value_enum, default_value_t = DiffModeArg::AllPairs)]
    pub diff_mode: DiffModeArg,
    /// Projection onto the average velocity over the whole tensor or per frame.
    #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
    pub scope: ScopeArg,
    /// Differentiate through the average velocity instead of holding it fixed.
    #[arg(long)]
    pub track_average_velocity: bool,
    /// Build the source representation with the source class and CFG.
    #[arg(long)]
    pub source_cfg: bool,
}

pub const DEFAULT_LR: f64 = 0.003;

impl GuidanceArgs {
    pub fn config(&self, default_lr: f64) -> GuidanceConfig {
        GuidanceConfig {
            alpha: self.alpha,
            beta: self.beta,
            lr: self.lr.unwrap_or(default_lr),
            k_opt: self.k_opt,
            t_opt: self.t_opt,
            source_rep: self.source_rep.into(),
            diff_mode: self.diff_mode.into(),
            gamma: self.gamma,
            epsilon_norm: self.epsilon_norm,
            projection_scope: match self.scope {
                ScopeArg::Global => ProjectionScope::Global,
                ScopeArg::PerFrame => ProjectionScope::PerFrame,
            },
            detach_average_velocity: !self.track_average_velocity,
            source_cfg: self.source_cfg,
        }
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Dataset manifest written by gen-data.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub target_class: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub field: FieldArgs,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Index of the dataset item whose motion is copied.
    #[arg(long)]
    pub source: usize,
    #[arg(long)]
    pub target_class: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[command(flatten)]
    pub field: FieldArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum BenchmarkSet {
    Easy,
    Hard,
    All,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Directory receiving `ablation-<timestamp>.csv` and its JSON config.
    #[arg(long)]
    pub out: PathBuf,
    /// Use the standard toy benchmark (its own dataset, oracle and jobs).
    #[arg(long, value_enum, conflicts_with = "dataset")]
    pub benchmark: Option<BenchmarkSet>,
    #[arg(long, required_unless_present = "benchmark")]
    pub dataset: Option<PathBuf>,
    /// Source item indices (dataset mode).
    #[arg(long, value_delimiter = ',')]
    pub sources: Vec<usize>,
    /// Target class ids (dataset mode).
    #[arg(long, value_delimiter = ',')]
    pub target_classes: Vec<u32>,
    /// Number of seeds per job.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed_start: u64,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,

    #[arg(long, value_delimiter = ',')]
    pub gammas: Vec<f64>,
    /// `alpha:beta` pairs, e.g. `4:1,1:1`.
    #[arg(long, value_delimiter = ',', value_parser = parse_weight)]
    pub weights: Vec<(f64, f64)>,
    #[arg(long, value_delimiter = ',')]
    pub t_opts: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub k_opts: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub source_reps: Vec<SourceRepArg>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub diff_modes: Vec<DiffModeArg>,

    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[command(flatten)]
    pub field: FieldArgs,
}

fn parse_weight(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected alpha:beta, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Run directory containing `trace/`.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory [default: <run>/inspect].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Directory of frame_*.pgm files to score.
    #[arg(long)]
    pub frames: PathBuf,
    /// Dataset manifest providing the class table.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub target_class: u32,
    /// Frames of the source clip, for the motion scores.
    #[arg(long)]
    pub source_frames: Option<PathBuf>,
    /// Also write the JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn weight_pairs_parse() {
        assert_eq!(parse_weight("4:1").unwrap(), (4.0, 1.0));
        assert!(parse_weight("4").is_err());
    }
}
