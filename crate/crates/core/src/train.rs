//! Two-stage training (MSE, then PD loss) with teacher forcing and AdamW,
//! checkpointing, and evaluation against the subjects' trajectories.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{Dataset, Point, SceneBundle};
use crate::density::{human_pds_loo, kde_argmax, mse_loss, pd_loss, scene_mixtures, trajectory_pds, KdeConfig, KdeMixture};
use crate::dynamics::{predict, rollout_on_tape, RolloutMode};
use crate::error::{Error, Result};
use crate::metrics::{euclidean, mean_dtw, mean_scanmatch, ScanMatchConfig};
use crate::model::{ModelConfig, ModelParams, Variant};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One AdamW update: `p ← p·(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            got: grads.len().min(state.m.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adamw", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            let gk = g.data()[k];
            p[k] *= decay;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            p[k] -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Teacher-forced MSE.
    Mse,
    /// Teacher-forced PD loss.
    Pd,
}

impl Stage {
    fn index(self) -> u64 {
        match self {
            Stage::Mse => 1,
            Stage::Pd => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Mse => "mse",
            Stage::Pd => "pd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stages {
    Both,
    MseOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    /// Epoch cap per stage.
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub plateau_patience: usize,
    /// Relative improvement a validation loss must make to reset patience.
    pub plateau_min_delta: f64,
    /// Scenes per optimizer step.
    pub batch_scenes: usize,
    pub stages: Stages,
    pub kde: KdeConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            stage1_epochs: 200,
            stage2_epochs: 200,
            plateau_patience: 5,
            plateau_min_delta: 1e-3,
            batch_scenes: 8,
            stages: Stages::Both,
            kde: KdeConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.betas.0) || !(0.0..1.0).contains(&o.betas.1) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(o.weight_decay >= 0.0) || !(o.eps > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and eps > 0".into()));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be at least 1".into()));
        }
        if !(self.plateau_min_delta >= 0.0) {
            return Err(Error::Config("plateau_min_delta must be non-negative".into()));
        }
        if self.batch_scenes == 0 {
            return Err(Error::Config("batch_scenes must be positive".into()));
        }
        if self.kde.grid_res < 32 {
            return Err(Error::Config("kde.grid_res must be at least 32".into()));
        }
        if !(self.kde.floor > 0.0) {
            return Err(Error::Config("kde.floor must be positive".into()));
        }
        Ok(())
    }

    /// Stages actually run; the `no-pdloss` variant never reaches stage 2.
    pub fn effective_stages(&self) -> Stages {
        if self.model.variant == Variant::NoPdLoss {
            Stages::MseOnly
        } else {
            self.stages
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: f64,
    pub alpha: Option<f64>,
}

/// Full training state; enough to resume without replaying earlier epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: TrainConfig,
    pub stage: Stage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    /// Current parameters.
    pub params: ModelParams,
    pub optimizer: AdamState,
    /// Best parameters by validation loss of the current stage.
    pub best: ModelParams,
    pub best_val: f64,
    /// Consecutive epochs without sufficient improvement.
    pub stale: usize,
    /// Best stage-1 parameters, kept once stage 2 starts.
    pub stage1_best: Option<ModelParams>,
    pub history: Vec<EpochLog>,
    pub finished: bool,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
                ck.format
            )));
        }
        if ck.params.len() != ck.optimizer.m.len() || ck.best.len() != ck.params.len() {
            return Err(Error::Validation("checkpoint tensors are inconsistent".into()));
        }
        Ok(ck)
    }

    /// Final model: the best-validation parameters.
    pub fn model(&self) -> &ModelParams {
        &self.best
    }

    pub fn write_log<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "stage", "train_loss", "val_loss", "alpha"])?;
        for e in &self.history {
            w.write_record([
                e.epoch.to_string(),
                e.stage.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.alpha.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scenes used for optimization and model selection.
pub struct TrainData<'a> {
    pub train: Vec<&'a SceneBundle>,
    pub val: Vec<&'a SceneBundle>,
}

impl<'a> TrainData<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Self {
        Self {
            train: ds.train(),
            val: ds.val(),
        }
    }
}

/// Teacher-forced loss of one scene, averaged over its subjects, with
/// gradients in parameter order when `with_grads`.
pub fn scene_loss(
    params: &ModelParams,
    scene: &SceneBundle,
    stage: Stage,
    mixes: Option<&[KdeMixture]>,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let tape = Tape::new();
    let vars = params.bind(&tape, with_grads)?;
    let gt = scene.normalized_trajectories();
    let trace = rollout_on_tape(
        &tape,
        scene,
        &vars,
        params.config.initial_point,
        RolloutMode::TeacherForced(&gt),
    )?;
    let loss = match stage {
        Stage::Mse => mse_loss(&trace.steps, &gt)?,
        Stage::Pd => {
            let mixes = mixes.ok_or_else(|| Error::Config("PD loss needs density mixtures".into()))?;
            pd_loss(mixes, &trace.steps)?
        }
    };
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::DivergedLoss {
            scene_id: scene.scene_id.clone(),
        });
    }
    if !with_grads {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    Ok((value, Some(vars.grads())))
}

/// Runs training for a set of scenes with cached per-word mixtures.
pub struct Trainer<'a> {
    data: TrainData<'a>,
    mixes: HashMap<String, Vec<KdeMixture>>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: TrainData<'a>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Config("training needs train and validation scenes".into()));
        }
        let d = config.model.embed_dim;
        if let Some(s) = data.train.iter().chain(&data.val).find(|s| s.embed_dim != d) {
            return Err(Error::Validation(format!(
                "scene {} has embed_dim {} but the model expects {d}",
                s.scene_id, s.embed_dim
            )));
        }
        let needs_pd = config.effective_stages() == Stages::Both;
        let mixes = if needs_pd {
            let all: Vec<&SceneBundle> = data.train.iter().chain(&data.val).copied().collect();
            all.par_iter()
                .map(|s| Ok((s.scene_id.clone(), scene_mixtures(s, &config.kde)?)))
                .collect::<Result<HashMap<_, _>>>()?
        } else {
            HashMap::new()
        };
        Ok(Self { data, mixes })
    }

    fn mixes_of(&self, scene: &SceneBundle) -> Option<&[KdeMixture]> {
        self.mixes.get(&scene.scene_id).map(|m| m.as_slice())
    }

    /// Fresh checkpoint at epoch 0 of stage 1.
    pub fn start(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let params = ModelParams::init(config.model.clone(), config.seed)?;
        let best_val = self.validation_loss(&params, Stage::Mse)?;
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: config.clone(),
            stage: Stage::Mse,
            epoch: 0,
            optimizer: AdamState::new(params.tensors()),
            best: params.clone(),
            params,
            best_val,
            stale: 0,
            stage1_best: None,
            history: Vec::new(),
            finished: false,
        })
    }

    /// Mean per-sample validation loss.
    pub fn validation_loss(&self, params: &ModelParams, stage: Stage) -> Result<f64> {
        let parts = self
            .data
            .val
            .par_iter()
            .map(|s| Ok((scene_loss(params, s, stage, self.mixes_of(s), false)?.0, s.n_subjects())))
            .collect::<Result<Vec<_>>>()?;
        Ok(weighted_mean(&parts))
    }

    /// Scene order for an epoch; a pure function of `(seed, stage, epoch)`.
    pub fn epoch_order(&self, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((stage.index() << 32) | epoch as u64);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over the training scenes; returns the mean training loss.
    pub fn train_epoch(&self, ck: &mut Checkpoint) -> Result<f64> {
        let cfg = &ck.config;
        let order = self.epoch_order(cfg.seed, ck.stage, ck.epoch);
        let mut epoch_parts = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_scenes) {
            let results = batch
                .par_iter()
                .map(|&k| {
                    let s = self.data.train[k];
                    let (loss, grads) = scene_loss(&ck.params, s, ck.stage, self.mixes_of(s), true)?;
                    Ok((loss, s.n_subjects(), grads.expect("gradients requested")))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows: usize = results.iter().map(|r| r.1).sum();
            let mut total: Vec<Tensor> = ck.params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
            for (loss, n, grads) in &results {
                let w = *n as f64 / rows as f64;
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += w * b;
                    }
                }
                epoch_parts.push((*loss, *n));
            }
            let mut refs: Vec<&mut Tensor> = ck.params.tensors_mut().collect();
            adamw_step(&mut refs, &total, &mut ck.optimizer, &cfg.optimizer)?;
        }
        Ok(weighted_mean(&epoch_parts))
    }

    /// Advances training by at most `max_epochs` epochs (all remaining when
    /// `None`). Stage switches do not count as epochs.
    pub fn run(&self, ck: &mut Checkpoint, max_epochs: Option<usize>) -> Result<()> {
        let mut done = 0usize;
        while !ck.finished && max_epochs.map_or(true, |m| done < m) {
            let cap = match ck.stage {
                Stage::Mse => ck.config.stage1_epochs,
                Stage::Pd => ck.config.stage2_epochs,
            };
            if ck.epoch >= cap || ck.stale >= ck.config.plateau_patience {
                self.advance_stage(ck)?;
                continue;
            }
            let train_loss = self.train_epoch(ck)?;
            let val_loss = self.validation_loss(&ck.params, ck.stage)?;
            ck.epoch += 1;
            done += 1;
            ck.history.push(EpochLog {
                epoch: ck.epoch,
                stage: ck.stage,
                train_loss,
                val_loss,
                alpha: ck.params.alpha(),
            });
            if val_loss < ck.best_val - ck.config.plateau_min_delta * ck.best_val.abs() {
                ck.stale = 0;
            } else {
                ck.stale += 1;
            }
            if val_loss < ck.best_val {
                ck.best_val = val_loss;
                ck.best = ck.params.clone();
            }
        }
        Ok(())
    }

    fn advance_stage(&self, ck: &mut Checkpoint) -> Result<()> {
        if ck.stage == Stage::Pd || ck.config.effective_stages() == Stages::MseOnly {
            ck.finished = true;
            return Ok(());
        }
        let start = ck.best.clone();
        ck.stage = Stage::Pd;
        ck.epoch = 0;
        ck.stale = 0;
        ck.best_val = self.validation_loss(&start, Stage::Pd)?;
        ck.optimizer = AdamState::new(start.tensors());
        ck.stage1_best = Some(start.clone());
        ck.params = start.clone();
        ck.best = start;
        Ok(())
    }
}

fn weighted_mean(parts: &[(f64, usize)]) -> f64 {
    let n: usize = parts.iter().map(|p| p.1).sum();
    parts.iter().map(|(v, k)| v * *k as f64).sum::<f64>() / n as f64
}

/// Trains from scratch to completion on the dataset's train/val split.
pub fn train_two_stage(dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    let trainer = Trainer::new(TrainData::from_dataset(dataset), config)?;
    let mut ck = trainer.start(config)?;
    trainer.run(&mut ck, None)?;
    Ok(ck)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub kde: KdeConfig,
    pub scanmatch: ScanMatchConfig,
    /// Divide DTW by the optimal path length.
    pub dtw_normalized: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kde: KdeConfig::default(),
            scanmatch: ScanMatchConfig::default(),
            dtw_normalized: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Pixels; lower is better.
    pub ed: f64,
    /// Pixels; lower is better.
    pub dtw: f64,
    pub scanmatch: f64,
    pub pds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScores {
    pub scene_id: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub predictor: String,
    pub mode: String,
    pub n_scenes: usize,
    /// Unweighted mean over scenes.
    pub aggregate: Scores,
    pub scenes: Vec<SceneScores>,
}

/// Scores a normalized prediction against every subject of the scene.
pub fn score_prediction(scene: &SceneBundle, pred: &[Point], mixes: &[KdeMixture], cfg: &EvalConfig) -> Result<Scores> {
    let px: Vec<Point> = pred.iter().map(|p| scene.denormalize(*p)).collect();
    let gts: Vec<Vec<Point>> = scene.trajectories.iter().map(|t| t.points.clone()).collect();
    Ok(Scores {
        ed: euclidean(&px, &gts)?,
        dtw: mean_dtw(&px, &gts, cfg.dtw_normalized)?,
        scanmatch: mean_scanmatch(&px, &gts, scene.image_size, &cfg.scanmatch)?,
        pds: trajectory_pds(mixes, pred)?,
    })
}

/// Evaluates any predictor returning normalized points, in parallel over
/// scenes; results keep the input order.
pub fn evaluate_with<F>(scenes: &[&SceneBundle], name: &str, cfg: &EvalConfig, predictor: F) -> Result<MetricsReport>
where
    F: Fn(&SceneBundle, &[KdeMixture]) -> Result<Vec<Point>> + Sync,
{
    if scenes.is_empty() {
        return Err(Error::EmptySequence);
    }
    let per_scene = scenes
        .par_iter()
        .map(|s| {
            let mixes = scene_mixtures(s, &cfg.kde)?;
            let pred = predictor(s, &mixes)?;
            Ok(SceneScores {
                scene_id: s.scene_id.clone(),
                scores: score_prediction(s, &pred, &mixes, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_scene.len() as f64;
    let mut agg = Scores::default();
    for s in &per_scene {
        agg.ed += s.scores.ed / n;
        agg.dtw += s.scores.dtw / n;
        agg.scanmatch += s.scores.scanmatch / n;
        agg.pds += s.scores.pds / n;
    }
    Ok(MetricsReport {
        predictor: name.to_string(),
        mode: "free".into(),
        n_scenes: per_scene.len(),
        aggregate: agg,
        scenes: per_scene,
    })
}

/// Free-rollout evaluation of a model.
pub fn evaluate(params: &ModelParams, scenes: &[&SceneBundle], cfg: &EvalConfig) -> Result<MetricsReport> {
    evaluate_with(scenes, params.variant().name(), cfg, |s, _| predict(s, params))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Image centre at every step.
    Center,
    /// Salient point at every step.
    Salient,
    /// Per scene, the single point of a 32×32 grid with the best PDS,
    /// chosen with hindsight on the scored subjects.
    BestConstant,
    /// Per-step density maximum; scores PDS 1 by construction.
    DensityArgmax,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Center, Baseline::Salient, Baseline::BestConstant, Baseline::DensityArgmax];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Center => "center",
            Baseline::Salient => "salient",
            Baseline::BestConstant => "best-constant",
            Baseline::DensityArgmax => "density-argmax",
        }
    }
}

const BEST_CONSTANT_GRID: usize = 32;

pub fn evaluate_baseline(baseline: Baseline, scenes: &[&SceneBundle], cfg: &EvalConfig) -> Result<MetricsReport> {
    let grid_res = cfg.kde.grid_res;
    evaluate_with(scenes, baseline.name(), cfg, |s, mixes| {
        let n = s.n_words();
        Ok(match baseline {
            Baseline::Center => vec![Point::new(0.5, 0.5); n],
            Baseline::Salient => vec![s.normalize(s.salient_point); n],
            Baseline::BestConstant => {
                let mut best = (f64::NEG_INFINITY, Point::new(0.5, 0.5));
                for iy in 0..BEST_CONSTANT_GRID {
                    for ix in 0..BEST_CONSTANT_GRID {
                        let p = Point::new(
                            (ix as f64 + 0.5) / BEST_CONSTANT_GRID as f64,
                            (iy as f64 + 0.5) / BEST_CONSTANT_GRID as f64,
                        );
                        let v = trajectory_pds(mixes, &vec![p; n])?;
                        if v > best.0 {
                            best = (v, p);
                        }
                    }
                }
                vec![best.1; n]
            }
            Baseline::DensityArgmax => mixes.iter().map(|m| kde_argmax(m, grid_res).0).collect(),
        })
    })
}

/// Mean leave-one-out PDS of the subjects against each other.
pub fn human_pds(scenes: &[&SceneBundle], cfg: &EvalConfig) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::EmptySequence);
    }
    let v = scenes
        .par_iter()
        .map(|s| human_pds_loo(s, &cfg.kde))
        .collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}
