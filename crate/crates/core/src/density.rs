//! Gaussian kernel density over multi-subject gaze points and the
//! probability density score (PDS): the density at a predicted point divided
//! by the maximum density of the mixture.
//!
//! Mixtures use equally weighted diagonal Gaussians with one shared per-axis
//! bandwidth from Silverman's rule, floored so coincident points still give a
//! proper density. The maximum has no closed form; it is found by scanning
//! the component means and a uniform grid over the unit square, then
//! polishing the best candidates with guarded Newton / mean-shift ascent.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::data::{Point, SceneBundle};
use crate::error::{Error, Result};

pub const DEFAULT_BANDWIDTH_FLOOR: f64 = 0.02;
pub const DEFAULT_GRID_RES: usize = 256;
const REFINE_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdeConfig {
    /// Lower bound on each axis bandwidth (normalized units).
    pub floor: f64,
    /// Grid resolution of the maximum search.
    pub grid_res: usize,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            floor: DEFAULT_BANDWIDTH_FLOOR,
            grid_res: DEFAULT_GRID_RES,
        }
    }
}

/// Per-step density of the subjects' gaze points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeMixture {
    pub means: Vec<Point>,
    /// `(σx, σy)`.
    pub bandwidth: (f64, f64),
    /// Cached estimate of `max_s density(s)`.
    pub max_density: f64,
}

fn silverman(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    1.06 * var.sqrt() * nf.powf(-0.2)
}

/// Fits a mixture with the default grid resolution.
pub fn fit_kde(points: &[Point], floor: f64) -> Result<KdeMixture> {
    fit_kde_with(
        points,
        &KdeConfig {
            floor,
            ..KdeConfig::default()
        },
    )
}

pub fn fit_kde_with(points: &[Point], config: &KdeConfig) -> Result<KdeMixture> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    if !(config.floor > 0.0) {
        return Err(Error::Config(format!("bandwidth floor must be positive, got {}", config.floor)));
    }
    let n = points.len();
    let sx = silverman(points.iter().map(|p| p.x), n).max(config.floor);
    let sy = silverman(points.iter().map(|p| p.y), n).max(config.floor);
    let mut mix = KdeMixture {
        means: points.to_vec(),
        bandwidth: (sx, sy),
        max_density: 0.0,
    };
    mix.max_density = kde_max(&mix, config.grid_res);
    Ok(mix)
}

impl KdeMixture {
    fn norm(&self) -> f64 {
        let (sx, sy) = self.bandwidth;
        1.0 / (self.means.len() as f64 * 2.0 * PI * sx * sy)
    }

    /// Peak height of a single component.
    pub fn component_peak(&self) -> f64 {
        let (sx, sy) = self.bandwidth;
        1.0 / (2.0 * PI * sx * sy)
    }
}

/// `(1/N) Σ_j N(s; μ_j, diag(σx², σy²))`.
pub fn density_at(mix: &KdeMixture, s: Point) -> f64 {
    let (sx, sy) = mix.bandwidth;
    let sum: f64 = mix
        .means
        .iter()
        .map(|m| {
            let dx = (s.x - m.x) / sx;
            let dy = (s.y - m.y) / sy;
            (-0.5 * (dx * dx + dy * dy)).exp()
        })
        .sum();
    sum * mix.norm()
}

/// Density and its gradient with respect to `s`.
pub fn density_grad(mix: &KdeMixture, s: Point) -> (f64, [f64; 2]) {
    let (sx, sy) = mix.bandwidth;
    let (mut f, mut gx, mut gy) = (0.0, 0.0, 0.0);
    for m in &mix.means {
        let dx = s.x - m.x;
        let dy = s.y - m.y;
        let e = (-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy))).exp();
        f += e;
        gx -= e * dx / (sx * sx);
        gy -= e * dy / (sy * sy);
    }
    let c = mix.norm();
    (f * c, [gx * c, gy * c])
}

fn hessian(mix: &KdeMixture, s: Point) -> [[f64; 2]; 2] {
    let (sx, sy) = mix.bandwidth;
    let (vx, vy) = (sx * sx, sy * sy);
    let mut h = [[0.0; 2]; 2];
    for m in &mix.means {
        let dx = s.x - m.x;
        let dy = s.y - m.y;
        let e = (-0.5 * (dx * dx / vx + dy * dy / vy)).exp();
        h[0][0] += e * (dx * dx / (vx * vx) - 1.0 / vx);
        h[1][1] += e * (dy * dy / (vy * vy) - 1.0 / vy);
        h[0][1] += e * dx * dy / (vx * vy);
    }
    h[1][0] = h[0][1];
    let c = mix.norm();
    h.iter_mut().flatten().for_each(|v| *v *= c);
    h
}

fn mean_shift(mix: &KdeMixture, s: Point) -> Point {
    let (sx, sy) = mix.bandwidth;
    let (mut w, mut ax, mut ay) = (0.0, 0.0, 0.0);
    for m in &mix.means {
        let dx = (s.x - m.x) / sx;
        let dy = (s.y - m.y) / sy;
        let e = (-0.5 * (dx * dx + dy * dy)).exp();
        w += e;
        ax += e * m.x;
        ay += e * m.y;
    }
    if w > 0.0 {
        Point::new(ax / w, ay / w)
    } else {
        s
    }
}

/// Ascends from `start`, never accepting a step that lowers the density.
fn refine(mix: &KdeMixture, start: Point) -> (Point, f64) {
    let mut s = start;
    let mut f = density_at(mix, s);
    for _ in 0..REFINE_STEPS {
        let (_, g) = density_grad(mix, s);
        let h = hessian(mix, s);
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let mut moved = false;
        if h[0][0] < 0.0 && det > 0.0 {
            let nx = -(h[1][1] * g[0] - h[0][1] * g[1]) / det;
            let ny = -(-h[1][0] * g[0] + h[0][0] * g[1]) / det;
            let cand = Point::new(s.x + nx, s.y + ny);
            let fc = density_at(mix, cand);
            if fc > f {
                s = cand;
                f = fc;
                moved = true;
            }
        }
        if !moved {
            let cand = mean_shift(mix, s);
            let fc = density_at(mix, cand);
            if fc > f {
                s = cand;
                f = fc;
            } else {
                break;
            }
        }
    }
    (s, f)
}

fn grid_coord(i: usize, res: usize) -> f64 {
    i as f64 / (res - 1) as f64
}

/// Best grid point and its density; the grid is separable per component.
fn grid_best(mix: &KdeMixture, res: usize) -> (Point, f64) {
    let (sx, sy) = mix.bandwidth;
    let k = mix.means.len();
    let mut gx = vec![0.0; k * res];
    let mut gy = vec![0.0; k * res];
    for (j, m) in mix.means.iter().enumerate() {
        for i in 0..res {
            let t = grid_coord(i, res);
            gx[j * res + i] = (-0.5 * ((t - m.x) / sx).powi(2)).exp();
            gy[j * res + i] = (-0.5 * ((t - m.y) / sy).powi(2)).exp();
        }
    }
    let mut best = (Point::new(0.0, 0.0), f64::NEG_INFINITY);
    let mut row = vec![0.0; res];
    for iy in 0..res {
        row.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..k {
            let wy = gy[j * res + iy];
            if wy == 0.0 {
                continue;
            }
            for (r, x) in row.iter_mut().zip(&gx[j * res..(j + 1) * res]) {
                *r += wy * x;
            }
        }
        for (ix, v) in row.iter().enumerate() {
            if *v > best.1 {
                best = (Point::new(grid_coord(ix, res), grid_coord(iy, res)), *v);
            }
        }
    }
    let p = best.0;
    (p, density_at(mix, p))
}

/// Location and value of the mixture maximum.
///
/// `grid_res` is raised to 32 if smaller.
pub fn kde_argmax(mix: &KdeMixture, grid_res: usize) -> (Point, f64) {
    let res = grid_res.max(32);
    let grid = grid_best(mix, res);
    let mut best = grid;
    let mut starts = vec![grid.0];
    starts.extend(mix.means.iter().copied());
    for s in starts {
        let f0 = density_at(mix, s);
        if f0 > best.1 {
            best = (s, f0);
        }
        let (p, f) = refine(mix, s);
        if f > best.1 {
            best = (p, f);
        }
    }
    best
}

/// Maximum density estimate; never below the grid or any component mean.
pub fn kde_max(mix: &KdeMixture, grid_res: usize) -> f64 {
    kde_argmax(mix, grid_res).1
}

/// Density normalized by the mixture maximum, clamped to `[0, 1]`.
pub fn pds(mix: &KdeMixture, s: Point) -> f64 {
    (density_at(mix, s) / mix.max_density).clamp(0.0, 1.0)
}

/// Mean PDS over a trajectory.
pub fn trajectory_pds(mixes: &[KdeMixture], traj: &[Point]) -> Result<f64> {
    if mixes.len() != traj.len() {
        return Err(Error::LengthMismatch {
            expected: mixes.len(),
            got: traj.len(),
        });
    }
    if traj.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(mixes.iter().zip(traj).map(|(m, p)| pds(m, *p)).sum::<f64>() / traj.len() as f64)
}

/// One mixture per word, from all subjects' normalized points.
pub fn scene_mixtures(scene: &SceneBundle, config: &KdeConfig) -> Result<Vec<KdeMixture>> {
    (0..scene.n_words())
        .map(|i| fit_kde_with(&scene.normalized_points_at(i), config))
        .collect()
}

/// PDS of every row of `s` (`[B, 2]`), returned as `[B, 1]`.
pub fn pds_var<'t>(mix: &KdeMixture, s: Var<'t>) -> Result<Var<'t>> {
    let tape = s.tape();
    let shape = s.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::shape("pds", &shape, &[0, 2]));
    }
    let rows = shape[0];
    let k = mix.means.len();
    let (sx, sy) = mix.bandwidth;
    let (px, py) = (1.0 / (sx * sx), 1.0 / (sy * sy));
    // -½ Σ_a (s_a − μ_a)²/σ_a² = -½ [ s²·w − 2 s·A + c ]
    let w = Tensor::matrix(2, k, [vec![px; k], vec![py; k]].concat())?;
    let a = Tensor::matrix(
        2,
        k,
        [
            mix.means.iter().map(|m| m.x * px).collect::<Vec<_>>(),
            mix.means.iter().map(|m| m.y * py).collect::<Vec<_>>(),
        ]
        .concat(),
    )?;
    let c: Vec<f64> = mix
        .means
        .iter()
        .map(|m| m.x * m.x * px + m.y * m.y * py)
        .collect();
    let c = Tensor::matrix(rows, k, c.repeat(rows))?;
    let quad = s
        .square()
        .matmul(tape.constant(w))?
        .sub(s.matmul(tape.constant(a))?.scale(2.0))?
        .add(tape.constant(c))?;
    let dens = quad
        .scale(-0.5)
        .exp()
        .matmul(tape.constant(Tensor::filled(&[k, 1], 1.0)))?
        .scale(mix.norm());
    Ok(dens.scale(1.0 / mix.max_density).clamp(0.0, 1.0))
}

/// `−Σ_i PDS(ŝ_i)`, averaged over batch rows.
pub fn pd_loss<'t>(mixes: &[KdeMixture], steps: &[Var<'t>]) -> Result<Var<'t>> {
    if mixes.len() != steps.len() {
        return Err(Error::LengthMismatch {
            expected: mixes.len(),
            got: steps.len(),
        });
    }
    let first = steps.first().ok_or(Error::EmptySequence)?;
    let rows = first.shape()[0] as f64;
    let mut total: Option<Var<'t>> = None;
    for (mix, s) in mixes.iter().zip(steps) {
        let v = pds_var(mix, *s)?.sum();
        total = Some(match total {
            Some(t) => t.add(v)?,
            None => v,
        });
    }
    Ok(total.expect("non-empty").scale(-1.0 / rows))
}

/// `(1/n) Σ_i |ŝ_i − s_i|²`, averaged over batch rows. `targets[b][i]` is row
/// `b`'s ground truth at step `i`.
pub fn mse_loss<'t>(steps: &[Var<'t>], targets: &[Vec<Point>]) -> Result<Var<'t>> {
    let first = steps.first().ok_or(Error::EmptySequence)?;
    let tape = first.tape();
    let rows = first.shape()[0];
    if targets.len() != rows {
        return Err(Error::LengthMismatch {
            expected: rows,
            got: targets.len(),
        });
    }
    if let Some(t) = targets.iter().find(|t| t.len() != steps.len()) {
        return Err(Error::LengthMismatch {
            expected: steps.len(),
            got: t.len(),
        });
    }
    let mut total: Option<Var<'t>> = None;
    for (i, s) in steps.iter().enumerate() {
        let data: Vec<f64> = targets.iter().flat_map(|t| [t[i].x, t[i].y]).collect();
        let diff = s.sub(tape.constant(Tensor::matrix(rows, 2, data)?))?;
        let v = diff.square().sum();
        total = Some(match total {
            Some(t) => t.add(v)?,
            None => v,
        });
    }
    Ok(total
        .expect("non-empty")
        .scale(1.0 / (steps.len() * rows) as f64))
}

/// Leave-one-out PDS of each subject against the others, averaged.
/// Needs at least three subjects.
pub fn human_pds_loo(scene: &SceneBundle, config: &KdeConfig) -> Result<f64> {
    let trajs = scene.normalized_trajectories();
    if trajs.len() < 3 {
        return Err(Error::TooFewPoints(trajs.len().saturating_sub(1)));
    }
    let mut total = 0.0;
    for held in 0..trajs.len() {
        let mixes = (0..scene.n_words())
            .map(|i| {
                let pts: Vec<Point> = trajs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != held)
                    .map(|(_, t)| t[i])
                    .collect();
                fit_kde_with(&pts, config)
            })
            .collect::<Result<Vec<_>>>()?;
        total += trajectory_pds(&mixes, &trajs[held])?;
    }
    Ok(total / trajs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(mean: Point, s: (f64, f64)) -> KdeMixture {
        let mut m = KdeMixture {
            means: vec![mean],
            bandwidth: s,
            max_density: 0.0,
        };
        m.max_density = kde_max(&m, 256);
        m
    }

    #[test]
    fn identical_points_use_floor() {
        let pts = vec![Point::new(0.3, 0.6); 8];
        let m = fit_kde(&pts, 0.02).unwrap();
        assert_eq!(m.bandwidth, (0.02, 0.02));
        let peak = 1.0 / (2.0 * PI * 0.02 * 0.02);
        assert!((m.max_density - peak).abs() < 1e-9 * peak);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(fit_kde(&[Point::new(0.1, 0.1)], 0.02), Err(Error::TooFewPoints(1))));
    }

    #[test]
    fn silverman_bandwidth() {
        let pts = vec![Point::new(0.2, 0.5), Point::new(0.4, 0.5), Point::new(0.6, 0.5)];
        let m = fit_kde(&pts, 0.001).unwrap();
        let want = 1.06 * 0.2 * 3f64.powf(-0.2);
        assert!((m.bandwidth.0 - want).abs() < 1e-15);
        assert_eq!(m.bandwidth.1, 0.001);
    }

    #[test]
    fn peak_and_three_sigma() {
        let m = single(Point::new(0.5, 0.4), (0.03, 0.05));
        let peak = 1.0 / (2.0 * PI * 0.03 * 0.05);
        assert!((density_at(&m, Point::new(0.5, 0.4)) - peak).abs() < 1e-9);
        let off = density_at(&m, Point::new(0.5 + 3.0 * 0.03, 0.4));
        assert!((off - peak * (-4.5f64).exp()).abs() < 1e-9 * peak);
        assert!((m.max_density - peak).abs() < 1e-9);
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let pts = vec![Point::new(0.2, 0.3), Point::new(0.25, 0.35), Point::new(0.6, 0.5)];
        let m = fit_kde(&pts, 0.02).unwrap();
        let s = Point::new(0.3, 0.33);
        let (_, g) = density_grad(&m, s);
        let eps = 1e-6;
        let nx = (density_at(&m, Point::new(s.x + eps, s.y)) - density_at(&m, Point::new(s.x - eps, s.y))) / (2.0 * eps);
        let ny = (density_at(&m, Point::new(s.x, s.y + eps)) - density_at(&m, Point::new(s.x, s.y - eps))) / (2.0 * eps);
        assert!((g[0] - nx).abs() <= 1e-6 * g[0].abs().max(1.0));
        assert!((g[1] - ny).abs() <= 1e-6 * g[1].abs().max(1.0));
    }

    #[test]
    fn two_far_components_halve_the_peak() {
        let mut m = KdeMixture {
            means: vec![Point::new(0.2, 0.5), Point::new(0.8, 0.5)],
            bandwidth: (0.02, 0.02),
            max_density: 0.0,
        };
        m.max_density = kde_max(&m, 256);
        let half = 0.5 / (2.0 * PI * 0.02 * 0.02);
        assert!((m.max_density - half).abs() < 1e-6);
    }

    #[test]
    fn grid_resolution_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let pts: Vec<Point> = (0..8)
                .map(|_| Point::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)))
                .collect();
            let m = fit_kde(&pts, 0.02).unwrap();
            let a = kde_max(&m, 128);
            let b = kde_max(&m, 512);
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn refinement_never_lowers_grid_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let pts: Vec<Point> = (0..6)
                .map(|_| Point::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
                .collect();
            let m = fit_kde(&pts, 0.02).unwrap();
            let (_, grid) = grid_best(&m, 64);
            assert!(kde_max(&m, 64) >= grid);
            for p in &pts {
                assert!(m.max_density >= density_at(&m, *p));
            }
        }
    }

    #[test]
    fn argmax_scores_one_and_far_point_scores_zero() {
        let pts = vec![
            Point::new(0.4, 0.4),
            Point::new(0.42, 0.38),
            Point::new(0.45, 0.41),
            Point::new(0.6, 0.6),
        ];
        let m = fit_kde(&pts, 0.02).unwrap();
        let (arg, _) = kde_argmax(&m, 256);
        assert!((pds(&m, arg) - 1.0).abs() < 1e-6);
        let (sx, sy) = m.bandwidth;
        let far = Point::new(0.6 + 6.5 * sx, 0.6 + 6.5 * sy);
        assert!(pds(&m, far) < 1e-6);
    }

    #[test]
    fn midpoint_between_clusters_scores_lower() {
        let mut pts = vec![];
        for d in [(-0.01, 0.0), (0.01, 0.0), (0.0, 0.01), (0.0, -0.01)] {
            pts.push(Point::new(0.25 + d.0, 0.5 + d.1));
            pts.push(Point::new(0.75 + d.0, 0.5 + d.1));
        }
        let m = fit_kde(&pts, 0.02).unwrap();
        let mid = pds(&m, Point::new(0.5, 0.5));
        assert!(mid < pds(&m, Point::new(0.25, 0.5)));
        assert!(mid < pds(&m, Point::new(0.75, 0.5)));
    }

    #[test]
    fn trajectory_pds_averages() {
        let m = single(Point::new(0.5, 0.5), (0.02, 0.02));
        let t = trajectory_pds(&[m.clone(), m.clone()], &[Point::new(0.5, 0.5), Point::new(0.0, 0.0)]).unwrap();
        assert!((t - 0.5).abs() < 1e-9);
        assert!(matches!(
            trajectory_pds(&[m], &[Point::new(0.5, 0.5), Point::new(0.5, 0.5)]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn pds_var_matches_scalar_version() {
        let pts = vec![Point::new(0.2, 0.3), Point::new(0.25, 0.35), Point::new(0.6, 0.5)];
        let m = fit_kde(&pts, 0.02).unwrap();
        let q = [Point::new(0.21, 0.31), Point::new(0.5, 0.5), Point::new(0.9, 0.1)];
        let tape = Tape::new();
        let s = tape.constant(Tensor::matrix(3, 2, q.iter().flat_map(|p| [p.x, p.y]).collect()).unwrap());
        let v = pds_var(&m, s).unwrap().value();
        for (k, p) in q.iter().enumerate() {
            assert!((v.data()[k] - pds(&m, *p)).abs() < 1e-12);
        }
    }

    #[test]
    fn pd_loss_of_perfect_trajectory_is_minus_n() {
        let m = single(Point::new(0.3, 0.7), (0.02, 0.03));
        let tape = Tape::new();
        let steps: Vec<Var<'_>> = (0..4).map(|_| tape.constant(Tensor::row(vec![0.3, 0.7]))).collect();
        let loss = pd_loss(&vec![m; 4], &steps).unwrap().item();
        assert!((loss + 4.0).abs() < 1e-9);
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let tape = Tape::new();
        let pts = vec![Point::new(0.1, 0.2), Point::new(0.3, 0.4)];
        let steps: Vec<Var<'_>> = pts.iter().map(|p| tape.constant(Tensor::row(vec![p.x, p.y]))).collect();
        assert_eq!(mse_loss(&steps, &[pts]).unwrap().item(), 0.0);
    }

    #[test]
    fn pd_loss_gradient_matches_finite_differences() {
        let pts = vec![Point::new(0.2, 0.3), Point::new(0.25, 0.35), Point::new(0.3, 0.28)];
        let m = fit_kde(&pts, 0.02).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.22, 0.31, 0.27, 0.3]).unwrap();
        let mixes = vec![m.clone(), m];
        let err = grad_check(
            |v| {
                let a = v.slice(0, 0, 1)?;
                let b = v.slice(0, 1, 2)?;
                pd_loss(&mixes, &[a, b])
            },
            &x,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
