//! Gaze dynamics: each word moves the gaze by `Δt · M`, where the motion
//! vector `M` sums an inherent-motion force, a salience force and a semantic
//! force:
//!
//! ```text
//! M = MLP_A(ŝ) + α·MLP_B(s_sal − ŝ) + (1 − α)·MLP_C(s_sem − ŝ)
//! ŝ_i = clamp(ŝ_{i−1} + Δt_i · M_i, 0, 1)
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Point, SceneBundle};
use crate::encoder::{encode_scene, SceneEncoding};
use crate::error::{Error, Result};
use crate::model::{InitialPoint, ModelParams, ModelVars};

/// Two-layer perceptron `2 → m → 2` with a tanh hidden layer.
#[derive(Clone, Copy)]
pub struct MlpVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

#[derive(Clone, Copy)]
pub struct DynamicsVars<'t> {
    /// Inherent motion tendency.
    pub mlp_a: Option<MlpVars<'t>>,
    /// Salience force.
    pub mlp_b: Option<MlpVars<'t>>,
    /// Semantic force.
    pub mlp_c: MlpVars<'t>,
    /// `α = σ(alpha_logit)`.
    pub alpha_logit: Option<Var<'t>>,
    /// Feedforward merge instead of the dynamical system.
    pub feedforward: bool,
}

/// Applies the MLP to every row of `x` (`[B, 2]`).
pub fn mlp_forward<'t>(x: Var<'t>, mlp: &MlpVars<'t>) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    let hidden = x.matmul(mlp.w1)?.add(mlp.b1.repeat_rows(rows)?)?.tanh();
    hidden.matmul(mlp.w2)?.add(mlp.b2.repeat_rows(rows)?)
}

/// Motion vector for a batch of current points. All inputs are `[B, 2]`
/// normalized coordinates; the result is in normalized units per second.
pub fn motion_vector<'t>(
    s_prev: Var<'t>,
    s_sal: Var<'t>,
    s_sem: Var<'t>,
    dynamics: &DynamicsVars<'t>,
) -> Result<Var<'t>> {
    let semantic = mlp_forward(s_sem.sub(s_prev)?, &dynamics.mlp_c)?;
    let mut parts = Vec::with_capacity(3);
    if let Some(a) = &dynamics.mlp_a {
        parts.push(mlp_forward(s_prev, a)?);
    }
    match (&dynamics.mlp_b, dynamics.alpha_logit) {
        (Some(b), Some(logit)) => {
            let alpha = logit.sigmoid();
            parts.push(mlp_forward(s_sal.sub(s_prev)?, b)?.mul_scalar(alpha)?);
            parts.push(semantic.mul_scalar(alpha.one_minus())?);
        }
        _ => parts.push(semantic),
    }
    let mut m = parts[0];
    for p in &parts[1..] {
        m = m.add(*p)?;
    }
    Ok(m)
}

/// Euler update `ŝ = clamp(s_prev + dt·M, 0, 1)`.
pub fn step<'t>(s_prev: Var<'t>, dt: f64, motion: Var<'t>) -> Result<Var<'t>> {
    if !(dt >= 0.0) {
        return Err(Error::NegativeDt(dt));
    }
    Ok(s_prev.add(motion.scale(dt))?.clamp(0.0, 1.0))
}

/// Ablation without dynamics: `α·MLP_B(s_sal) + (1−α)·MLP_C(s_sem)`.
fn feedforward_point<'t>(s_sal: Var<'t>, s_sem: Var<'t>, dynamics: &DynamicsVars<'t>) -> Result<Var<'t>> {
    let b = dynamics
        .mlp_b
        .as_ref()
        .ok_or_else(|| Error::Config("feedforward merge needs mlp_b".into()))?;
    let logit = dynamics
        .alpha_logit
        .ok_or_else(|| Error::Config("feedforward merge needs alpha".into()))?;
    let alpha = logit.sigmoid();
    let sal = mlp_forward(s_sal, b)?.mul_scalar(alpha)?;
    let sem = mlp_forward(s_sem, &dynamics.mlp_c)?.mul_scalar(alpha.one_minus())?;
    Ok(sal.add(sem)?.clamp(0.0, 1.0))
}

/// What a rollout feeds back as the previous point.
#[derive(Clone, Copy, Debug)]
pub enum RolloutMode<'a> {
    /// The model's own previous prediction.
    Free,
    /// Ground-truth previous points; one normalized trajectory per batch row.
    TeacherForced(&'a [Vec<Point>]),
}

impl RolloutMode<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            RolloutMode::Free => "free",
            RolloutMode::TeacherForced(_) => "teacher-forced",
        }
    }
}

/// Starting point `ŝ₀` in normalized coordinates.
pub fn initial_point(scene: &SceneBundle, initial: InitialPoint) -> Point {
    match initial {
        InitialPoint::Salient => scene.normalize(scene.salient_point),
        InitialPoint::Center => Point::new(0.5, 0.5),
    }
}

/// Result of a rollout recorded on a tape.
pub struct RolloutTrace<'t> {
    /// One `[B, 2]` prediction per word.
    pub steps: Vec<Var<'t>>,
    pub encoding: SceneEncoding<'t>,
}

impl RolloutTrace<'_> {
    pub fn batch(&self) -> usize {
        self.steps.first().map(|s| s.shape()[0]).unwrap_or(0)
    }

    /// Predicted trajectories, one per batch row.
    pub fn points(&self) -> Vec<Vec<Point>> {
        let values: Vec<Tensor> = self.steps.iter().map(|s| s.value()).collect();
        (0..self.batch())
            .map(|b| values.iter().map(|v| Point::new(v.at(b, 0), v.at(b, 1))).collect())
            .collect()
    }
}

fn rows_tensor(points: impl Iterator<Item = Point>) -> Tensor {
    let data: Vec<f64> = points.flat_map(|p| [p.x, p.y]).collect();
    let rows = data.len() / 2;
    Tensor::matrix(rows, 2, data).expect("rows")
}

/// Rolls the model over every word of `scene`.
pub fn rollout_on_tape<'t>(
    tape: &'t Tape,
    scene: &SceneBundle,
    vars: &ModelVars<'t>,
    initial: InitialPoint,
    mode: RolloutMode<'_>,
) -> Result<RolloutTrace<'t>> {
    let n = scene.n_words();
    let batch = match mode {
        RolloutMode::Free => 1,
        RolloutMode::TeacherForced(gt) => {
            if gt.is_empty() {
                return Err(Error::EmptySequence);
            }
            if let Some(t) = gt.iter().find(|t| t.len() != n) {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: t.len(),
                });
            }
            gt.len()
        }
    };
    let encoding = encode_scene(tape, scene, &vars.encoder)?;
    let start = initial_point(scene, initial);
    let sal = tape.constant(rows_tensor(std::iter::repeat(scene.normalize(scene.salient_point)).take(batch)));
    let dts = scene.time_steps();

    let mut steps: Vec<Var<'t>> = Vec::with_capacity(n);
    let mut prev = tape.constant(rows_tensor(std::iter::repeat(start).take(batch)));
    for i in 0..n {
        if i > 0 {
            prev = match mode {
                RolloutMode::Free => steps[i - 1],
                RolloutMode::TeacherForced(gt) => {
                    tape.constant(rows_tensor(gt.iter().map(|t| t[i - 1])))
                }
            };
        }
        let sem = encoding.s_sem.slice(0, i, i + 1)?.repeat_rows(batch)?;
        let next = if vars.dynamics.feedforward {
            feedforward_point(sal, sem, &vars.dynamics)?
        } else {
            let m = motion_vector(prev, sal, sem, &vars.dynamics)?;
            step(prev, dts[i], m)?
        };
        steps.push(next);
    }
    Ok(RolloutTrace { steps, encoding })
}

/// Inference rollout; returns normalized trajectories (one for free mode,
/// one per forced trajectory otherwise).
pub fn rollout(scene: &SceneBundle, params: &ModelParams, mode: RolloutMode<'_>) -> Result<Vec<Vec<Point>>> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false)?;
    let trace = rollout_on_tape(&tape, scene, &vars, params.config.initial_point, mode)?;
    Ok(trace.points())
}

/// Free rollout as a single normalized trajectory.
pub fn predict(scene: &SceneBundle, params: &ModelParams) -> Result<Vec<Point>> {
    Ok(rollout(scene, params, RolloutMode::Free)?.remove(0))
}

/// Exported rollout in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub scene_id: String,
    pub points: Vec<Point>,
    pub mode: String,
    /// Word end times, one per point.
    pub t_end: Vec<f64>,
}

impl RolloutRecord {
    pub fn new(scene: &SceneBundle, normalized: &[Point], mode: &str) -> Self {
        Self {
            scene_id: scene.scene_id.clone(),
            points: normalized.iter().map(|p| scene.denormalize(*p)).collect(),
            mode: mode.to_string(),
            t_end: scene.end_times(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::model::{ModelConfig, Variant};
    use crate::synthetic::{generate, SynthConfig};

    fn scene(words: usize, seed: u64) -> SceneBundle {
        let cfg = SynthConfig {
            n_scenes: 1,
            words_per_scene: words,
            subjects: 3,
            embed_dim: 6,
            seed,
            ..Default::default()
        };
        generate(&cfg).unwrap().remove(0).bundle
    }

    fn params(variant: Variant, seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            embed_dim: 6,
            hidden: 5,
            key_dim: 4,
            mlp_width: 3,
            variant,
            ..Default::default()
        };
        ModelParams::init(cfg, seed).unwrap()
    }

    fn zero_dynamics(p: &mut ModelParams) {
        for nt in p.params.iter_mut() {
            if nt.name.starts_with("mlp_") {
                nt.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn row<'t>(tape: &'t Tape, x: f64, y: f64) -> Var<'t> {
        tape.constant(Tensor::row(vec![x, y]))
    }

    #[test]
    fn zero_networks_give_zero_motion() {
        let mut p = params(Variant::Full, 1);
        zero_dynamics(&mut p);
        let tape = Tape::new();
        let vars = p.bind(&tape, false).unwrap();
        let m = motion_vector(row(&tape, 0.2, 0.3), row(&tape, 0.9, 0.1), row(&tape, 0.5, 0.5), &vars.dynamics)
            .unwrap();
        assert_eq!(m.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_alpha_ignores_semantic_point() {
        let mut p = params(Variant::Full, 2);
        p.get_mut("alpha.logit").unwrap().data_mut()[0] = 20.0;
        let tape = Tape::new();
        let vars = p.bind(&tape, false).unwrap();
        let s = row(&tape, 0.4, 0.6);
        let sal = row(&tape, 0.1, 0.1);
        let a = motion_vector(s, sal, row(&tape, 0.0, 0.0), &vars.dynamics).unwrap().value();
        let b = motion_vector(s, sal, row(&tape, 1.0, 1.0), &vars.dynamics).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn motion_gradients_match_finite_differences() {
        let p = params(Variant::Full, 3);
        let names: Vec<String> = p
            .params
            .iter()
            .filter(|n| n.name.starts_with("mlp_") || n.name.starts_with("alpha"))
            .map(|n| n.name.clone())
            .collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let err = grad_check_many(
            |v| {
                let tape = v[0].tape();
                let mlp = |k: usize| MlpVars {
                    w1: v[k],
                    b1: v[k + 1],
                    w2: v[k + 2],
                    b2: v[k + 3],
                };
                let dynamics = DynamicsVars {
                    mlp_a: Some(mlp(0)),
                    mlp_b: Some(mlp(4)),
                    mlp_c: mlp(8),
                    alpha_logit: Some(v[12]),
                    feedforward: false,
                };
                let m = motion_vector(row(tape, 0.3, 0.7), row(tape, 0.8, 0.2), row(tape, 0.1, 0.4), &dynamics)?;
                Ok(m.square().sum())
            },
            &tensors,
            1e-6,
        )
        .unwrap();
        assert_eq!(names.len(), 13);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn step_arithmetic_and_clamp() {
        let tape = Tape::new();
        let s = step(row(&tape, 0.5, 0.5), 0.4, row(&tape, 0.25, -0.5)).unwrap().value();
        assert!((s.data()[0] - 0.6).abs() < 1e-15 && (s.data()[1] - 0.3).abs() < 1e-15);
        let c = step(row(&tape, 0.9, 0.9), 1.0, row(&tape, 1.0, 1.0)).unwrap().value();
        assert_eq!(c.data(), &[1.0, 1.0]);
        let z = step(row(&tape, 0.123, 0.987), 0.0, row(&tape, 5.0, -3.0)).unwrap().value();
        assert_eq!(z.data(), &[0.123, 0.987]);
        assert!(matches!(
            step(row(&tape, 0.1, 0.1), -0.1, row(&tape, 0.0, 0.0)),
            Err(Error::NegativeDt(_))
        ));
    }

    #[test]
    fn zero_dynamics_rollout_stays_at_salient_point() {
        let sc = scene(8, 3);
        let mut p = params(Variant::Full, 4);
        zero_dynamics(&mut p);
        let traj = predict(&sc, &p).unwrap();
        let s0 = sc.normalize(sc.salient_point);
        assert!(traj.iter().all(|q| *q == s0));
    }

    #[test]
    fn teacher_forced_step_ignores_earlier_predictions() {
        let sc = scene(6, 5);
        let p = params(Variant::Full, 6);
        let gt = sc.normalized_trajectories();
        let base = rollout(&sc, &p, RolloutMode::TeacherForced(&gt)).unwrap();
        let mut perturbed = gt.clone();
        perturbed[0][1] = Point::new(0.05, 0.95);
        let after = rollout(&sc, &p, RolloutMode::TeacherForced(&perturbed)).unwrap();
        // step 3 (index 3) depends on gt[2] only
        assert_eq!(base[0][3], after[0][3]);
        assert_eq!(base[0][..2], after[0][..2]);
        assert_ne!(base[0][2], after[0][2]);
        assert_eq!(base[1], after[1]);
    }

    #[test]
    fn free_rollout_equals_manual_composition() {
        let sc = scene(3, 7);
        let p = params(Variant::Full, 8);
        let auto = predict(&sc, &p).unwrap();

        let tape = Tape::new();
        let vars = p.bind(&tape, false).unwrap();
        let enc = encode_scene(&tape, &sc, &vars.encoder).unwrap();
        let sal_pt = sc.normalize(sc.salient_point);
        let sal = row(&tape, sal_pt.x, sal_pt.y);
        let mut prev = sal;
        let dts = sc.time_steps();
        for i in 0..3 {
            let sem = enc.s_sem.slice(0, i, i + 1).unwrap();
            let m = motion_vector(prev, sal, sem, &vars.dynamics).unwrap();
            prev = step(prev, dts[i], m).unwrap();
            let v = prev.value();
            assert_eq!(Point::new(v.data()[0], v.data()[1]), auto[i]);
        }
    }

    #[test]
    fn rollout_is_deterministic_and_in_unit_square() {
        let sc = scene(12, 9);
        for v in Variant::ALL {
            let p = params(v, 10);
            let a = predict(&sc, &p).unwrap();
            let b = predict(&sc, &p).unwrap();
            assert_eq!(a, b);
            assert!(a
                .iter()
                .all(|q| (0.0..=1.0).contains(&q.x) && (0.0..=1.0).contains(&q.y)));
        }
    }

    #[test]
    fn feedforward_variant_ignores_time_steps() {
        let sc = scene(6, 11);
        let p = params(Variant::NoDyns, 12);
        let base = predict(&sc, &p).unwrap();
        let mut stretched = sc.clone();
        for w in stretched.transcript.iter_mut() {
            w.t_start *= 3.0;
            w.t_end *= 3.0;
        }
        assert_eq!(base, predict(&stretched, &p).unwrap());
    }

    #[test]
    fn teacher_forcing_length_mismatch() {
        let sc = scene(4, 1);
        let p = params(Variant::Full, 1);
        let bad = vec![vec![Point::new(0.5, 0.5); 3]];
        assert!(matches!(
            rollout(&sc, &p, RolloutMode::TeacherForced(&bad)),
            Err(Error::LengthMismatch { expected: 4, got: 3 })
        ));
    }
}
