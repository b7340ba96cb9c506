//! Synthetic scenes with a known gaze process.
//!
//! Each word points at a target patch. Subjects start at the salient point
//! and, at every word end, move a fraction of the way toward the current
//! target (and slightly toward the salient point), plus Gaussian noise. The
//! fraction grows with the word's time step, so the process is an Euler step
//! of a linear attraction and lies inside the model family.
//!
//! Words without a target ("ungroundable") keep the previous word's target:
//! only the transcript context tells where the gaze is heading.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{save_bundle, DatasetManifest, GazeTrajectory, Patch, Point, SceneBundle, TimedWord};
use crate::error::{Error, Result};

/// Shortest word duration; the drift fraction is `λ·Δt / MIN_WORD_SECONDS`.
pub const MIN_WORD_SECONDS: f64 = 0.2;
const MAX_WORD_SECONDS: f64 = 0.7;
const MAX_GAP_SECONDS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub words_per_scene: usize,
    pub subjects: usize,
    pub embed_dim: usize,
    pub grid_n: usize,
    pub image_size: [f64; 2],
    /// Scale of the target embedding inside a word embedding.
    pub kappa: f64,
    /// Per-axis gaze noise, normalized units.
    pub sigma_subj: f64,
    /// Drift rate in `(0, 1]`; 1 reaches the target at every word.
    pub drift: f64,
    /// Pull toward the salient point, same units as `drift`; capped so the
    /// two fractions never sum past 1.
    pub salience_pull: f64,
    /// Probability that a subject skips a word's drift and only jitters.
    pub hold_rate: f64,
    /// Probability that a recorded point is a glance at the salient point
    /// while the subject's own path continues unchanged.
    pub glance_rate: f64,
    pub ungroundable_rate: f64,
    /// Probability that a groundable word refers to the current target again.
    pub persistence: f64,
    /// Fraction of groundable words that carry a grounded patch.
    pub grounded_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            words_per_scene: 26,
            subjects: 8,
            embed_dim: 64,
            grid_n: 4,
            image_size: [1024.0, 768.0],
            kappa: 5.0,
            sigma_subj: 0.03,
            drift: 0.3,
            salience_pull: 0.01,
            hold_rate: 0.25,
            glance_rate: 0.0,
            ungroundable_rate: 0.2,
            persistence: 0.5,
            grounded_rate: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_scenes == 0 {
            return bad("n_scenes must be positive");
        }
        if self.words_per_scene == 0 {
            return bad("words_per_scene must be positive");
        }
        if self.subjects < 2 {
            return bad("subjects must be at least 2 (the density estimate needs several points per word)");
        }
        if self.embed_dim == 0 || self.grid_n == 0 {
            return bad("embed_dim and grid_n must be positive");
        }
        if !(self.image_size[0] > 0.0 && self.image_size[1] > 0.0) {
            return bad("image_size must be positive");
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be positive");
        }
        if !(self.sigma_subj >= 0.0) {
            return bad("sigma_subj must be non-negative");
        }
        if !(self.drift > 0.0 && self.drift <= 1.0) {
            return bad("drift must lie in (0, 1]");
        }
        if !(self.salience_pull >= 0.0 && self.salience_pull <= 1.0) {
            return bad("salience_pull must lie in [0, 1]");
        }
        for (name, v) in [
            ("hold_rate", self.hold_rate),
            ("glance_rate", self.glance_rate),
            ("ungroundable_rate", self.ungroundable_rate),
            ("persistence", self.persistence),
            ("grounded_rate", self.grounded_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Generator output with the hidden variables the gaze process used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub bundle: SceneBundle,
    /// Target patch per word (row-major index).
    pub target_patch: Vec<usize>,
    /// Target centre per word, normalized.
    pub targets: Vec<Point>,
    /// Whether the word's embedding encodes its target.
    pub groundable: Vec<bool>,
    /// Noise-free trajectory of the process, normalized.
    pub noiseless: Vec<Point>,
}

pub fn scene_id(seed: u64, index: usize) -> String {
    format!("syn-{seed}-{index:05}")
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize, normal: &Normal<f64>) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Drift fraction for a word lasting `dt` seconds.
pub fn drift_fraction(rate: f64, dt: f64) -> f64 {
    (rate * dt / MIN_WORD_SECONDS).min(1.0)
}

fn generate_scene(cfg: &SynthConfig, index: usize) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let (d, g, n) = (cfg.embed_dim, cfg.grid_n, cfg.words_per_scene);
    let size = cfg.image_size;
    let cell = Point::new(size[0] / g as f64, size[1] / g as f64);

    let patches: Vec<Patch> = (0..g * g)
        .map(|k| Patch {
            center: Point::new(((k % g) as f64 + 0.5) * cell.x, ((k / g) as f64 + 0.5) * cell.y),
            embedding: unit_vector(&mut rng, d, &std),
        })
        .collect();
    let salient_patch = rng.gen_range(0..g * g);
    let salient_point = patches[salient_patch].center;
    let norm = |p: Point| Point::new(p.x / size[0], p.y / size[1]);

    let noise_scale = 1.0 / (d as f64).sqrt();
    let mut words = Vec::with_capacity(n);
    let mut target_patch = Vec::with_capacity(n);
    let mut groundable = Vec::with_capacity(n);
    let mut t = rng.gen_range(0.0..MIN_WORD_SECONDS);
    let mut current = salient_patch;
    for i in 0..n {
        let ok = rng.gen::<f64>() >= cfg.ungroundable_rate;
        if ok && !(i > 0 && rng.gen::<f64>() < cfg.persistence) {
            current = rng.gen_range(0..g * g);
        }
        let noise: Vec<f64> = (0..d).map(|_| std.sample(&mut rng) * noise_scale).collect();
        let embedding: Vec<f64> = if ok {
            patches[current]
                .embedding
                .iter()
                .zip(&noise)
                .map(|(e, z)| cfg.kappa * e + z)
                .collect()
        } else {
            noise
        };
        let grounded_patch = (ok && rng.gen::<f64>() < cfg.grounded_rate).then(|| {
            let c = patches[current].center;
            Patch {
                center: Point::new(
                    c.x + rng.gen_range(-0.25..0.25) * cell.x,
                    c.y + rng.gen_range(-0.25..0.25) * cell.y,
                ),
                embedding: patches[current].embedding.clone(),
            }
        });
        let dur = rng.gen_range(MIN_WORD_SECONDS..MAX_WORD_SECONDS);
        words.push(TimedWord {
            index: i + 1,
            text: if ok { format!("w{current}") } else { "uh".to_string() },
            t_start: t,
            t_end: t + dur,
            embedding,
            grounded_patch,
        });
        t += dur + rng.gen_range(0.0..MAX_GAP_SECONDS);
        target_patch.push(current);
        groundable.push(ok);
    }
    let targets: Vec<Point> = target_patch.iter().map(|k| norm(patches[*k].center)).collect();
    let sal = norm(salient_point);

    let mut dts = Vec::with_capacity(n);
    let mut prev_end = 0.0;
    for w in &words {
        dts.push(w.t_end - prev_end);
        prev_end = w.t_end;
    }
    let advance = |s: Point, i: usize, noise: (f64, f64)| -> Point {
        let f = drift_fraction(cfg.drift, dts[i]);
        let b = drift_fraction(cfg.salience_pull, dts[i]).min(1.0 - f);
        Point::new(
            (s.x + f * (targets[i].x - s.x) + b * (sal.x - s.x) + noise.0).clamp(0.0, 1.0),
            (s.y + f * (targets[i].y - s.y) + b * (sal.y - s.y) + noise.1).clamp(0.0, 1.0),
        )
    };

    let mut noiseless = Vec::with_capacity(n);
    let mut s = sal;
    for i in 0..n {
        s = advance(s, i, (0.0, 0.0));
        noiseless.push(s);
    }

    let mut trajectories = Vec::with_capacity(cfg.subjects);
    for j in 0..cfg.subjects {
        let mut s = sal;
        let mut points = Vec::with_capacity(n);
        for i in 0..n {
            let e = (
                std.sample(&mut rng) * cfg.sigma_subj,
                std.sample(&mut rng) * cfg.sigma_subj,
            );
            s = if cfg.hold_rate > 0.0 && rng.gen::<f64>() < cfg.hold_rate {
                Point::new((s.x + e.0).clamp(0.0, 1.0), (s.y + e.1).clamp(0.0, 1.0))
            } else {
                advance(s, i, e)
            };
            let recorded = if cfg.glance_rate > 0.0 && rng.gen::<f64>() < cfg.glance_rate {
                Point::new(
                    (sal.x + std.sample(&mut rng) * cfg.sigma_subj).clamp(0.0, 1.0),
                    (sal.y + std.sample(&mut rng) * cfg.sigma_subj).clamp(0.0, 1.0),
                )
            } else {
                s
            };
            points.push(Point::new(recorded.x * size[0], recorded.y * size[1]));
        }
        trajectories.push(GazeTrajectory {
            subject_id: j as u32 + 1,
            points,
        });
    }

    let bundle = SceneBundle {
        scene_id: scene_id(cfg.seed, index),
        image_size: size,
        embed_dim: d,
        grid_n: g,
        patches,
        salient_point,
        transcript: words,
        trajectories,
    };
    bundle.validate()?;
    Ok(SyntheticScene {
        bundle,
        target_patch,
        targets,
        groundable,
        noiseless,
    })
}

/// Generates `cfg.n_scenes` scenes; scene `k` depends only on `(seed, k)`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    (0..cfg.n_scenes)
        .into_par_iter()
        .map(|k| generate_scene(cfg, k))
        .collect()
}

/// Hidden variables of one scene, stored next to the bundles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub scene_id: String,
    pub target_patch: Vec<usize>,
    pub targets: Vec<Point>,
    pub groundable: Vec<bool>,
    pub noiseless: Vec<Point>,
}

impl From<&SyntheticScene> for SceneTruth {
    fn from(s: &SyntheticScene) -> Self {
        Self {
            scene_id: s.bundle.scene_id.clone(),
            target_patch: s.target_patch.clone(),
            targets: s.targets.clone(),
            groundable: s.groundable.clone(),
            noiseless: s.noiseless.clone(),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth.json";

/// Writes `<id>.json` per scene, `truth.json` and `manifest.json` (split
/// seed `split_seed`). Returns the written paths, manifest last.
pub fn write_suite(dir: impl AsRef<Path>, scenes: &[SyntheticScene], split_seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(scenes.len() + 2);
    let mut names = Vec::with_capacity(scenes.len());
    for s in scenes {
        let name = PathBuf::from(format!("{}.json", s.bundle.scene_id));
        let path = dir.join(&name);
        save_bundle(&s.bundle, &path)?;
        written.push(path);
        names.push(name);
    }
    let truth: Vec<SceneTruth> = scenes.iter().map(SceneTruth::from).collect();
    let truth_path = dir.join(TRUTH_FILE);
    fs::write(&truth_path, serde_json::to_string(&truth)?)?;
    written.push(truth_path);
    let manifest_path = dir.join(MANIFEST_FILE);
    DatasetManifest {
        seed: split_seed,
        bundles: names,
    }
    .save(&manifest_path)?;
    written.push(manifest_path);
    Ok(written)
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<SceneTruth>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Control trajectory at a constant speed: `n` points with random
/// directions, lengths in `[min_len, max_len]` pixels and durations
/// `length / speed`. Returns `(points, timestamps)`.
pub fn constant_speed_track(
    n: usize,
    speed: f64,
    min_len: f64,
    max_len: f64,
    size: [f64; 2],
    seed: u64,
) -> (Vec<Point>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Point::new(size[0] / 2.0, size[1] / 2.0);
    let mut t = 0.0;
    let mut points = vec![p];
    let mut times = vec![t];
    while points.len() < n {
        let len = rng.gen_range(min_len..=max_len);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let q = Point::new(p.x + len * theta.cos(), p.y + len * theta.sin());
        if q.x < 0.0 || q.y < 0.0 || q.x > size[0] || q.y > size[1] {
            continue;
        }
        t += p.dist(q) / speed;
        p = q;
        points.push(p);
        times.push(t);
    }
    (points, times)
}
