use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use eyear::data::parse_bundle;
use eyear::dynamics::{predict, rollout, RolloutMode, RolloutRecord};
use eyear::metrics::{saccade_analysis, SaccadeConfig};
use eyear::synthetic::{generate, write_suite, SynthConfig};
use eyear::train::{
    evaluate, evaluate_baseline, human_pds, Baseline, Checkpoint, EvalConfig, MetricsReport, Stages, TrainConfig,
    TrainData, Trainer,
};
use eyear::{load_dataset, Dataset, Error, Point, Split, Variant};
use serde::{Deserialize, Serialize};

use crate::manifest::{HashedFile, RunManifest};
use crate::{AblateArgs, AnalyzeArgs, Cli, Command, EvalArgs, GenArgs, ModeArg, RolloutArgs, StageArg, TrainArgs};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.json";
pub const ROLLOUT: &str = "rollout.json";
pub const SACCADES: &str = "saccades.csv";
pub const ABLATION: &str = "ablation.json";

/// Contents of `--config`; every section is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub saccade: SaccadeConfig,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
            .into()
        })
    }
}

/// What `eval` and `ablate` write as `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub split: Split,
    pub model: MetricsReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baselines: Vec<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_pds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub pds: f64,
    pub ed: f64,
    pub dtw: f64,
    pub scanmatch: f64,
}

struct Run {
    started: Instant,
    manifest: RunManifest,
    out: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(cli: &Cli, command: &str) -> Result<Self> {
        fs::create_dir_all(&cli.global.out).with_context(|| format!("creating {}", cli.global.out.display()))?;
        Ok(Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config: serde_json::Value::Null,
                seed: cli.global.seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_clock_seconds: 0.0,
            },
            out: cli.global.out.clone(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.push(HashedFile::of(path)?);
        Ok(())
    }

    fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    /// Writes `bytes` to `rel` under the output directory.
    fn emit(&mut self, rel: impl Into<PathBuf>, bytes: &[u8]) -> Result<()> {
        let rel = rel.into();
        let path = self.out.join(&rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(rel);
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let path = self.manifest.write(&self.out, &self.outputs)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = FileConfig::load(cli.global.config.as_deref())?;
    match &cli.command {
        Command::Gen(a) => gen(cli, config, a),
        Command::Train(a) => train(cli, config, a),
        Command::Eval(a) => eval(cli, config, a),
        Command::Rollout(a) => rollout_cmd(cli, a),
        Command::Analyze(a) => analyze(cli, config, a),
        Command::Ablate(a) => ablate(cli, config, a),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(value)?)
}

fn gen(cli: &Cli, config: FileConfig, a: &GenArgs) -> Result<()> {
    let mut synth = config.synth;
    synth.n_scenes = a.scenes.unwrap_or(synth.n_scenes);
    synth.words_per_scene = a.words.unwrap_or(synth.words_per_scene);
    synth.subjects = a.subjects.unwrap_or(synth.subjects);
    synth.embed_dim = a.embed_dim.unwrap_or(synth.embed_dim);
    synth.grid_n = a.grid_n.unwrap_or(synth.grid_n);
    synth.kappa = a.kappa.unwrap_or(synth.kappa);
    synth.sigma_subj = a.sigma.unwrap_or(synth.sigma_subj);
    synth.drift = a.drift.unwrap_or(synth.drift);
    synth.seed = cli.global.seed.unwrap_or(synth.seed);
    synth.validate()?;

    let mut run = Run::new(cli, "gen")?;
    run.config(&synth)?;
    run.manifest.seed = Some(synth.seed);
    let scenes = generate(&synth)?;
    let written = write_suite(&run.out, &scenes, synth.seed)?;
    for path in written {
        let rel = path.strip_prefix(&run.out).unwrap_or(&path).to_path_buf();
        run.outputs.push(rel);
    }
    println!("generated {} scenes", scenes.len());
    run.finish()
}

fn load_data(run: &mut Run, path: &Path) -> Result<Dataset> {
    run.input(path)?;
    let ds = load_dataset(path)?;
    Ok(ds)
}

fn embed_dim_of(ds: &Dataset) -> Result<usize> {
    ds.embed_dim()
        .ok_or_else(|| Error::Validation("dataset has no scenes".into()).into())
}

/// Trains to completion (or `max_epochs`) and writes the checkpoint and log
/// under `prefix`.
fn train_into(run: &mut Run, ds: &Dataset, ck: Option<Checkpoint>, cfg: &TrainConfig, max_epochs: Option<usize>, prefix: &Path) -> Result<Checkpoint> {
    let trainer = Trainer::new(TrainData::from_dataset(ds), cfg)?;
    let mut ck = match ck {
        Some(ck) => ck,
        None => trainer.start(cfg)?,
    };
    trainer.run(&mut ck, max_epochs)?;
    run.emit(prefix.join(CHECKPOINT), &serde_json::to_vec(&ck)?)?;
    let mut log = Vec::new();
    ck.write_log(&mut log)?;
    run.emit(prefix.join(TRAIN_LOG), &log)?;
    Ok(ck)
}

fn train(cli: &Cli, config: FileConfig, a: &TrainArgs) -> Result<()> {
    let mut run = Run::new(cli, "train")?;
    let ds = load_data(&mut run, &a.data)?;
    let (cfg, resumed) = match &a.resume {
        Some(path) => {
            run.input(path)?;
            let ck = Checkpoint::load(path)?;
            (ck.config.clone(), Some(ck))
        }
        None => {
            let mut cfg = config.train;
            cfg.seed = cli.global.seed.unwrap_or(cfg.seed);
            cfg.model.embed_dim = embed_dim_of(&ds)?;
            if let Some(v) = a.variant {
                cfg.model.variant = v.into();
            }
            if let Some(s) = a.stage {
                cfg.stages = match s {
                    StageArg::Both => Stages::Both,
                    StageArg::MseOnly => Stages::MseOnly,
                };
            }
            if let Some(lr) = a.lr {
                cfg.optimizer.lr = lr;
            }
            (cfg, None)
        }
    };
    run.config(&cfg)?;
    run.manifest.seed = Some(cfg.seed);
    let ck = train_into(&mut run, &ds, resumed, &cfg, a.max_epochs, Path::new(""))?;
    println!(
        "stage {} epoch {} best val {:.6}{}",
        ck.stage,
        ck.epoch,
        ck.best_val,
        if ck.finished { " (finished)" } else { "" }
    );
    run.finish()
}

fn evaluate_split(ck: &Checkpoint, ds: &Dataset, split: Split, cfg: &EvalConfig) -> Result<EvalOutput> {
    let scenes = ds.part(split);
    if scenes.is_empty() {
        return Err(Error::Validation(format!("split {split:?} is empty")).into());
    }
    Ok(EvalOutput {
        split,
        model: evaluate(ck.model(), &scenes, cfg)?,
        baselines: Vec::new(),
        human_pds: None,
    })
}

fn eval(cli: &Cli, config: FileConfig, a: &EvalArgs) -> Result<()> {
    let mut run = Run::new(cli, "eval")?;
    run.input(&a.checkpoint)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = load_data(&mut run, &a.data)?;
    run.config(&config.eval)?;
    let split = Split::from(a.split);
    let mut out = evaluate_split(&ck, &ds, split, &config.eval)?;
    let scenes = ds.part(split);
    if a.baselines {
        out.baselines = Baseline::ALL
            .iter()
            .map(|b| evaluate_baseline(*b, &scenes, &config.eval))
            .collect::<eyear::Result<_>>()?;
    }
    if a.human {
        out.human_pds = Some(human_pds(&scenes, &config.eval)?);
    }
    let agg = &out.model.aggregate;
    println!(
        "{} scenes: pds {:.4} ed {:.2} dtw {:.2} scanmatch {:.4}",
        out.model.n_scenes, agg.pds, agg.ed, agg.dtw, agg.scanmatch
    );
    run.emit(METRICS, &to_json(&out)?)?;
    run.finish()
}

fn rollout_cmd(cli: &Cli, a: &RolloutArgs) -> Result<()> {
    let mut run = Run::new(cli, "rollout")?;
    run.input(&a.checkpoint)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = load_data(&mut run, &a.data)?;
    let scene = ds
        .find(&a.scene)
        .ok_or_else(|| Error::Validation(format!("scene {} is not in the dataset", a.scene)))?;
    let params = ck.model();
    let record = match a.mode {
        ModeArg::Free => RolloutRecord::new(scene, &predict(scene, params)?, RolloutMode::Free.label()),
        ModeArg::TeacherForced => {
            let subject = a
                .subject
                .ok_or_else(|| Error::Validation("teacher-forced rollout needs --subject".into()))?;
            let k = scene
                .trajectories
                .iter()
                .position(|t| t.subject_id == subject)
                .ok_or_else(|| Error::Validation(format!("scene {} has no subject {subject}", a.scene)))?;
            let forced = vec![scene.normalized_trajectories().swap_remove(k)];
            let mode = RolloutMode::TeacherForced(&forced);
            let pts = rollout(scene, params, mode)?.remove(0);
            RolloutRecord::new(scene, &pts, mode.label())
        }
    };
    run.config(&serde_json::json!({ "scene": a.scene, "mode": record.mode, "subject": a.subject }))?;
    run.emit(ROLLOUT, &to_json(&record)?)?;
    run.finish()
}

/// A rollout record's trajectory, or every subject of a scene bundle.
fn trajectories_in(path: &Path) -> Result<Vec<(Vec<Point>, Vec<f64>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(record) = serde_json::from_str::<RolloutRecord>(&text) {
        if record.points.len() != record.t_end.len() {
            return Err(Error::LengthMismatch {
                expected: record.t_end.len(),
                got: record.points.len(),
            }
            .into());
        }
        return Ok(vec![(record.points, record.t_end)]);
    }
    let bundle = parse_bundle(&text, path)?;
    let times = bundle.end_times();
    Ok(bundle
        .trajectories
        .iter()
        .map(|t| (t.points.clone(), times.clone()))
        .collect())
}

fn analyze(cli: &Cli, config: FileConfig, a: &AnalyzeArgs) -> Result<()> {
    let mut cfg = config.saccade;
    if let Some(n) = a.angle_bins {
        cfg.angle_bins = n;
    }
    if let Some(edges) = &a.length_edges {
        cfg.length_edges = edges.clone();
    }
    cfg.validate()?;
    let mut run = Run::new(cli, "analyze")?;
    run.config(&cfg)?;
    let mut trajs = Vec::new();
    for f in &a.files {
        run.input(f)?;
        trajs.extend(trajectories_in(f)?);
    }
    let table = saccade_analysis(&trajs, &cfg)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    println!("{} saccade bins populated", table.populated().count());
    run.emit(SACCADES, &csv)?;
    run.finish()
}

fn ablate(cli: &Cli, config: FileConfig, a: &AblateArgs) -> Result<()> {
    let mut run = Run::new(cli, "ablate")?;
    let ds = load_data(&mut run, &a.data)?;
    let mut base = config.train;
    base.seed = cli.global.seed.unwrap_or(base.seed);
    base.model.embed_dim = embed_dim_of(&ds)?;
    run.config(&serde_json::json!({ "train": base, "eval": config.eval }))?;
    run.manifest.seed = Some(base.seed);
    let variants: Vec<Variant> = if a.variant.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variant.iter().map(|v| (*v).into()).collect()
    };
    let mut rows = Vec::new();
    for v in variants {
        let mut cfg = base.clone();
        cfg.model.variant = v;
        let dir = PathBuf::from(v.name());
        let ck = train_into(&mut run, &ds, None, &cfg, None, &dir)?;
        let out = evaluate_split(&ck, &ds, Split::Test, &config.eval)?;
        run.emit(dir.join(METRICS), &to_json(&out)?)?;
        let agg = &out.model.aggregate;
        println!("{:<12} pds {:.4} ed {:.2} dtw {:.2} scanmatch {:.4}", v.name(), agg.pds, agg.ed, agg.dtw, agg.scanmatch);
        rows.push(AblationRow {
            variant: v,
            pds: agg.pds,
            ed: agg.ed,
            dtw: agg.dtw,
            scanmatch: agg.scanmatch,
        });
    }
    run.emit(ABLATION, &to_json(&rows)?)?;
    run.finish()
}
