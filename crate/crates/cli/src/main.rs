//! Command-line front end: generate synthetic suites, train, evaluate, roll
//! out, analyze saccades and run ablations. Every command writes its outputs
//! plus a `run.json` manifest into `--out`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "eyear", version, about = "Gaze-trajectory prediction from narrated images")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Seed overriding the config file's seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with optional `synth`, `train`, `eval` and `saccade` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene suite.
    Gen(GenArgs),
    /// Two-stage training.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict one scene's trajectory.
    Rollout(RolloutArgs),
    /// Saccade statistics of trajectory files.
    Analyze(AnalyzeArgs),
    /// Train and evaluate model variants.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub words: Option<usize>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Both,
    MseOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    NoSalience,
    NoDyns,
    NoGru,
    NoPdloss,
}

impl From<VariantArg> for eyear::Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => eyear::Variant::Full,
            VariantArg::NoSalience => eyear::Variant::NoSalience,
            VariantArg::NoDyns => eyear::Variant::NoDyns,
            VariantArg::NoGru => eyear::Variant::NoGru,
            VariantArg::NoPdloss => eyear::Variant::NoPdLoss,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, conflicts_with = "resume")]
    pub stage: Option<StageArg>,
    #[arg(long, value_enum, conflicts_with = "resume")]
    pub variant: Option<VariantArg>,
    #[arg(long, conflicts_with = "resume")]
    pub lr: Option<f64>,
    /// Continue from a checkpoint with its stored configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation.
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for eyear::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => eyear::Split::Train,
            SplitArg::Val => eyear::Split::Val,
            SplitArg::Test => eyear::Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also score the constant and density baselines.
    #[arg(long)]
    pub baselines: bool,
    /// Also report leave-one-out human PDS.
    #[arg(long)]
    pub human: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Free,
    TeacherForced,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub scene: String,
    #[arg(long, value_enum, default_value = "free")]
    pub mode: ModeArg,
    /// Subject whose trajectory is fed back in teacher-forced mode.
    #[arg(long)]
    pub subject: Option<u32>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Rollout JSON files or scene bundles (every subject is used).
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long)]
    pub angle_bins: Option<usize>,
    /// Comma-separated length bin edges in pixels, starting at 0.
    #[arg(long, value_delimiter = ',')]
    pub length_edges: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Variants to run; all when omitted.
    #[arg(long, value_enum)]
    pub variant: Vec<VariantArg>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use eyear::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::DivergedLoss { .. } => EXIT_RUNTIME,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("EYEAR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| eyear::Error::Config(format!("EYEAR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow::anyhow!("thread pool: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|_| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
