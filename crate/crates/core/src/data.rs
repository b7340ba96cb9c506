//! Scene bundles, their JSON file format, and the train/val/test split.
//!
//! Files store pixel coordinates. Everything downstream of loading works in
//! coordinates normalized to the unit square by the image size; use
//! [`SceneBundle::normalize`] and [`SceneBundle::denormalize`] to convert.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D coordinate. Serialized as `[x, y]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// One image region with a precomputed embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub center: Point,
    #[serde(rename = "emb")]
    pub embedding: Vec<f64>,
}

/// A transcript word with its timing and optional grounded region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    /// 1-based position in the transcript; derived from file order.
    #[serde(skip)]
    pub index: usize,
    #[serde(rename = "w")]
    pub text: String,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(rename = "emb")]
    pub embedding: Vec<f64>,
    /// `None` when no region was grounded for this word.
    #[serde(rename = "grounded")]
    pub grounded_patch: Option<Patch>,
}

/// One subject's gaze points, one per word end time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeTrajectory {
    #[serde(rename = "subject")]
    pub subject_id: u32,
    pub points: Vec<Point>,
}

/// Everything precomputed for one image-narration pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBundle {
    pub scene_id: String,
    /// `(W, H)` in pixels.
    pub image_size: [f64; 2],
    pub embed_dim: usize,
    pub grid_n: usize,
    /// `grid_n²` patches in row-major order.
    pub patches: Vec<Patch>,
    pub salient_point: Point,
    #[serde(rename = "words")]
    pub transcript: Vec<TimedWord>,
    pub trajectories: Vec<GazeTrajectory>,
}

impl SceneBundle {
    pub fn width(&self) -> f64 {
        self.image_size[0]
    }

    pub fn height(&self) -> f64 {
        self.image_size[1]
    }

    pub fn n_words(&self) -> usize {
        self.transcript.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.trajectories.len()
    }

    pub fn normalize(&self, p: Point) -> Point {
        Point::new(p.x / self.width(), p.y / self.height())
    }

    pub fn denormalize(&self, p: Point) -> Point {
        Point::new(p.x * self.width(), p.y * self.height())
    }

    /// Word end times in seconds.
    pub fn end_times(&self) -> Vec<f64> {
        self.transcript.iter().map(|w| w.t_end).collect()
    }

    /// Gap preceding each word's end time, with the first measured from 0.
    pub fn time_steps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.transcript
            .iter()
            .map(|w| {
                let dt = w.t_end - prev;
                prev = w.t_end;
                dt
            })
            .collect()
    }

    /// Subject trajectories in normalized coordinates.
    pub fn normalized_trajectories(&self) -> Vec<Vec<Point>> {
        self.trajectories
            .iter()
            .map(|t| t.points.iter().map(|p| self.normalize(*p)).collect())
            .collect()
    }

    /// Points of every subject at word `i` (0-based), normalized.
    pub fn normalized_points_at(&self, i: usize) -> Vec<Point> {
        self.trajectories
            .iter()
            .map(|t| self.normalize(t.points[i]))
            .collect()
    }

    /// Checks every bundle invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let id = &self.scene_id;
        let fail = |msg: String| Err(Error::Validation(format!("scene {id}: {msg}")));
        let (w, h) = (self.width(), self.height());
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return fail(format!("image size must be positive, got {w}x{h}"));
        }
        let inside = |p: Point| p.is_finite() && (0.0..=w).contains(&p.x) && (0.0..=h).contains(&p.y);
        let d = self.embed_dim;
        if d == 0 {
            return fail("embed_dim must be positive".into());
        }
        let finite_emb = |e: &[f64]| e.len() == d && e.iter().all(|v| v.is_finite());
        if self.grid_n == 0 {
            return fail("grid_n must be positive".into());
        }
        if self.patches.len() != self.grid_n * self.grid_n {
            return fail(format!(
                "patch count {} != grid_n² = {}",
                self.patches.len(),
                self.grid_n * self.grid_n
            ));
        }
        for (k, p) in self.patches.iter().enumerate() {
            let c = p.center;
            if !(c.is_finite() && c.x > 0.0 && c.x < w && c.y > 0.0 && c.y < h) {
                return fail(format!("patch {k} center {c:?} not strictly inside the image"));
            }
            if !finite_emb(&p.embedding) {
                return fail(format!("patch {k} embedding dimension/finite check failed"));
            }
        }
        if !inside(self.salient_point) {
            return fail(format!("salient point {:?} outside the image", self.salient_point));
        }
        if self.transcript.is_empty() {
            return fail("transcript is empty".into());
        }
        let mut prev_end = f64::NEG_INFINITY;
        for (k, word) in self.transcript.iter().enumerate() {
            if !(word.t_start.is_finite() && word.t_end.is_finite() && word.t_start >= 0.0) {
                return fail(format!("word {} has invalid timestamps", k + 1));
            }
            if word.t_start >= word.t_end {
                return fail(format!("word {} t_start >= t_end", k + 1));
            }
            if word.t_start < prev_end {
                return fail(format!("word {} overlaps the previous word", k + 1));
            }
            prev_end = word.t_end;
            if !finite_emb(&word.embedding) {
                return fail(format!("word {} embedding dimension != {d}", k + 1));
            }
            if let Some(g) = &word.grounded_patch {
                if !finite_emb(&g.embedding) {
                    return fail(format!("word {} grounded embedding dimension != {d}", k + 1));
                }
                if !inside(g.center) {
                    return fail(format!("word {} grounded center outside the image", k + 1));
                }
            }
        }
        let n = self.transcript.len();
        let n_subj = self.trajectories.len();
        if n_subj < 2 {
            return fail(format!("need at least 2 subject trajectories, got {n_subj}"));
        }
        let mut seen = HashSet::new();
        for t in &self.trajectories {
            if t.subject_id < 1 || t.subject_id as usize > n_subj || !seen.insert(t.subject_id) {
                return fail(format!("subject id {} invalid or duplicated", t.subject_id));
            }
            if t.points.len() != n {
                return fail(format!(
                    "trajectory length {} != word count {n} (subject {})",
                    t.points.len(),
                    t.subject_id
                ));
            }
            if let Some(p) = t.points.iter().find(|p| !inside(**p)) {
                return fail(format!("subject {} point {p:?} outside the image", t.subject_id));
            }
        }
        Ok(())
    }

    fn assign_indices(&mut self) {
        for (k, w) in self.transcript.iter_mut().enumerate() {
            w.index = k + 1;
        }
    }
}

/// Parses and validates a bundle from JSON text.
pub fn parse_bundle(text: &str, origin: &Path) -> Result<SceneBundle> {
    let mut bundle: SceneBundle = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    bundle.assign_indices();
    bundle.validate()?;
    Ok(bundle)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<SceneBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_bundle(&text, path)
}

pub fn bundle_to_json(bundle: &SceneBundle) -> Result<String> {
    Ok(serde_json::to_string(bundle)?)
}

pub fn save_bundle(bundle: &SceneBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bundle_to_json(bundle)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Bundles plus their split assignment, sorted by `scene_id`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub bundles: Vec<SceneBundle>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn part(&self, split: Split) -> Vec<&SceneBundle> {
        self.bundles
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(b, _)| b)
            .collect()
    }

    pub fn train(&self) -> Vec<&SceneBundle> {
        self.part(Split::Train)
    }

    pub fn val(&self) -> Vec<&SceneBundle> {
        self.part(Split::Val)
    }

    pub fn test(&self) -> Vec<&SceneBundle> {
        self.part(Split::Test)
    }

    pub fn find(&self, scene_id: &str) -> Option<&SceneBundle> {
        self.bundles.iter().find(|b| b.scene_id == scene_id)
    }

    pub fn embed_dim(&self) -> Option<usize> {
        self.bundles.first().map(|b| b.embed_dim)
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train().len(), self.val().len(), self.test().len())
    }
}

/// Seeded 8:1:1 split by bundle. Validation and test each get
/// `floor(n/10)` bundles; the remainder goes to training. Bundles are sorted
/// by `scene_id` first so the result does not depend on input order.
pub fn split_dataset(mut bundles: Vec<SceneBundle>, seed: u64) -> Result<Dataset> {
    let n = bundles.len();
    if n < 10 {
        return Err(Error::TooFewScenes(n));
    }
    bundles.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    if let Some(w) = bundles.windows(2).find(|w| w[0].scene_id == w[1].scene_id) {
        return Err(Error::Validation(format!("duplicate scene_id {}", w[0].scene_id)));
    }
    let held = n / 10;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        if rank < held {
            splits[idx] = Split::Val;
        } else if rank < 2 * held {
            splits[idx] = Split::Test;
        }
    }
    Ok(Dataset { bundles, splits })
}

/// On-disk dataset manifest: bundle paths (relative to the manifest) and the
/// split seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub bundles: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Loads every bundle listed in a manifest and splits them.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bundles = manifest
        .bundles
        .iter()
        .map(|p| load_bundle(base.join(p)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = bundles.first() {
        if let Some(b) = bundles.iter().find(|b| b.embed_dim != first.embed_dim) {
            return Err(Error::Validation(format!(
                "scene {} embed_dim {} differs from {}",
                b.scene_id, b.embed_dim, first.embed_dim
            )));
        }
    }
    split_dataset(bundles, manifest.seed)
}


#[cfg(test)]
mod tests {
    use super::tests_support::minimal_bundle;
    use super::*;

    #[test]
    fn minimal_bundle_loads() {
        let b = minimal_bundle();
        let json = bundle_to_json(&b).unwrap();
        let loaded = parse_bundle(&json, Path::new("mem")).unwrap();
        assert_eq!(loaded.n_words(), 2);
        assert_eq!(loaded, b);
        assert!(json.contains("\"grounded\":null"));
    }

    #[test]
    fn short_trajectory_rejected() {
        let mut b = minimal_bundle();
        b.trajectories[1].points.pop();
        let json = bundle_to_json(&b).unwrap();
        let err = parse_bundle(&json, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("trajectory length")), "{err}");
    }

    #[test]
    fn malformed_json_is_parse_error() {
        let err = parse_bundle("{\"scene_id\": 3", Path::new("x.json")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn overlapping_words_rejected() {
        let mut b = minimal_bundle();
        b.transcript[1].t_start = 0.3;
        assert!(b.validate().unwrap_err().to_string().contains("overlaps"));
    }

    #[test]
    fn single_subject_rejected() {
        let mut b = minimal_bundle();
        b.trajectories.pop();
        assert!(b.validate().is_err());
    }

    #[test]
    fn wrong_patch_count_rejected() {
        let mut b = minimal_bundle();
        b.patches.pop();
        assert!(b.validate().unwrap_err().to_string().contains("patch count"));
    }

    #[test]
    fn embedding_dimension_checked() {
        let mut b = minimal_bundle();
        b.transcript[0].embedding.push(1.0);
        assert!(b.validate().unwrap_err().to_string().contains("embedding dimension"));
    }

    #[test]
    fn point_outside_image_rejected() {
        let mut b = minimal_bundle();
        b.trajectories[0].points[0] = Point::new(1025.0, 3.0);
        assert!(b.validate().is_err());
    }

    fn many(n: usize) -> Vec<SceneBundle> {
        (0..n)
            .map(|k| {
                let mut b = minimal_bundle();
                b.scene_id = format!("s{k:03}");
                b
            })
            .collect()
    }

    #[test]
    fn split_ten_is_eight_one_one() {
        let ds = split_dataset(many(10), 1).unwrap();
        assert_eq!(ds.counts(), (8, 1, 1));
    }

    #[test]
    fn split_twenty_three_floors() {
        let ds = split_dataset(many(23), 5).unwrap();
        assert_eq!(ds.counts(), (19, 2, 2));
    }

    #[test]
    fn split_is_deterministic_and_order_independent() {
        let a = split_dataset(many(100), 9).unwrap();
        let b = split_dataset(many(100), 9).unwrap();
        assert_eq!(a.splits, b.splits);
        let mut rev = many(100);
        rev.reverse();
        let c = split_dataset(rev, 9).unwrap();
        assert_eq!(a.splits, c.splits);
        let d = split_dataset(many(100), 10).unwrap();
        assert_ne!(a.splits, d.splits);
    }

    #[test]
    fn split_requires_ten() {
        assert!(matches!(split_dataset(many(9), 0), Err(Error::TooFewScenes(9))));
    }
}
