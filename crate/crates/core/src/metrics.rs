//! Trajectory similarity metrics (pixel units) and saccade-vector analysis.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Point;
use crate::error::{Error, Result};

/// Mean over subjects of the mean pointwise distance to `pred`.
pub fn euclidean(pred: &[Point], gts: &[Vec<Point>]) -> Result<f64> {
    if gts.is_empty() || pred.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut total = 0.0;
    for gt in gts {
        if gt.len() != pred.len() {
            return Err(Error::LengthMismatch {
                expected: pred.len(),
                got: gt.len(),
            });
        }
        total += pred.iter().zip(gt).map(|(a, b)| a.dist(*b)).sum::<f64>() / pred.len() as f64;
    }
    Ok(total / gts.len() as f64)
}

/// DTW accumulated cost with Euclidean local cost and match/insert/delete
/// steps; both endpoints aligned.
pub fn dtw(a: &[Point], b: &[Point]) -> Result<f64> {
    Ok(dtw_table(a, b)?.0)
}

/// DTW cost divided by the number of aligned pairs on the optimal path.
pub fn dtw_normalized(a: &[Point], b: &[Point]) -> Result<f64> {
    let (cost, len) = dtw_table(a, b)?;
    Ok(cost / len as f64)
}

/// `(cost, path length)`; among equal-cost paths the shortest is kept.
fn dtw_table(a: &[Point], b: &[Point]) -> Result<(f64, usize)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (n, m) = (a.len(), b.len());
    let mut d = vec![(f64::INFINITY, 0usize); (n + 1) * (m + 1)];
    d[0] = (0.0, 0);
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        for j in 1..=m {
            let c = a[i - 1].dist(b[j - 1]);
            let best = [d[at(i - 1, j - 1)], d[at(i - 1, j)], d[at(i, j - 1)]]
                .into_iter()
                .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                .expect("three candidates");
            d[at(i, j)] = (best.0 + c, best.1 + 1);
        }
    }
    Ok(d[at(n, m)])
}

/// Mean DTW of `pred` against every subject.
pub fn mean_dtw(pred: &[Point], gts: &[Vec<Point>], normalized: bool) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::EmptySequence);
    }
    let f = if normalized { dtw_normalized } else { dtw };
    let mut total = 0.0;
    for gt in gts {
        total += f(pred, gt)?;
    }
    Ok(total / gts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanMatchConfig {
    /// Cells along `(x, y)`.
    pub grid: (usize, usize),
    /// Score added per gap (0 or negative).
    pub gap: f64,
}

impl Default for ScanMatchConfig {
    fn default() -> Self {
        Self { grid: (8, 8), gap: 0.0 }
    }
}

fn cell_of(p: Point, size: [f64; 2], grid: (usize, usize)) -> (usize, usize) {
    let q = |v: f64, extent: f64, cells: usize| -> usize {
        let c = (v / extent * cells as f64).floor();
        (c.max(0.0) as usize).min(cells - 1)
    };
    (q(p.x, size[0], grid.0), q(p.y, size[1], grid.1))
}

fn cell_center(c: (usize, usize), size: [f64; 2], grid: (usize, usize)) -> Point {
    Point::new(
        (c.0 as f64 + 0.5) * size[0] / grid.0 as f64,
        (c.1 as f64 + 0.5) * size[1] / grid.1 as f64,
    )
}

/// Global alignment score (maximized) with a constant gap score.
pub fn needleman_wunsch<T>(a: &[T], b: &[T], substitution: impl Fn(&T, &T) -> f64, gap: f64) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut f = vec![0.0; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        f[at(i, 0)] = i as f64 * gap;
    }
    for j in 1..=m {
        f[at(0, j)] = j as f64 * gap;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = f[at(i - 1, j - 1)] + substitution(&a[i - 1], &b[j - 1]);
            let up = f[at(i - 1, j)] + gap;
            let left = f[at(i, j - 1)] + gap;
            f[at(i, j)] = diag.max(up).max(left);
        }
    }
    f[at(n, m)]
}

/// ScanMatch-style similarity in `[0, 1]` for points in an image of `size`.
pub fn scanmatch(a: &[Point], b: &[Point], size: [f64; 2], config: &ScanMatchConfig) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let grid = config.grid;
    let diag = size[0].hypot(size[1]);
    let ca: Vec<_> = a.iter().map(|p| cell_of(*p, size, grid)).collect();
    let cb: Vec<_> = b.iter().map(|p| cell_of(*p, size, grid)).collect();
    let sub = |u: &(usize, usize), v: &(usize, usize)| {
        1.0 - cell_center(*u, size, grid).dist(cell_center(*v, size, grid)) / diag
    };
    needleman_wunsch(&ca, &cb, sub, config.gap) / longest as f64
}

/// Mean ScanMatch of `pred` against every subject.
pub fn mean_scanmatch(pred: &[Point], gts: &[Vec<Point>], size: [f64; 2], config: &ScanMatchConfig) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(gts.iter().map(|g| scanmatch(pred, g, size, config)).sum::<f64>() / gts.len() as f64)
}

/// Vector from one gaze point to the next.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaccadeVector {
    pub dx: f64,
    pub dy: f64,
    pub length: f64,
    /// Degrees in `[0, 360)`, measured with `atan2(dy, dx)` in image coordinates.
    pub angle: f64,
    pub duration: f64,
    pub speed: f64,
}

impl SaccadeVector {
    pub fn between(a: Point, b: Point, duration: f64) -> Self {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let length = dx.hypot(dy);
        let mut angle = dy.atan2(dx).to_degrees();
        if angle < 0.0 {
            angle += 360.0;
        }
        if angle >= 360.0 {
            angle -= 360.0;
        }
        let speed = if duration > 0.0 { length / duration } else { 0.0 };
        Self {
            dx,
            dy,
            length,
            angle,
            duration,
            speed,
        }
    }
}

/// Saccades between consecutive points; `times[i]` is the timestamp of
/// `points[i]`.
pub fn saccades(points: &[Point], times: &[f64]) -> Result<Vec<SaccadeVector>> {
    if points.len() != times.len() {
        return Err(Error::LengthMismatch {
            expected: points.len(),
            got: times.len(),
        });
    }
    for i in 1..times.len() {
        if !(times[i] > times[i - 1]) {
            return Err(Error::NonMonotonicTime { index: i });
        }
    }
    Ok(points
        .windows(2)
        .zip(times.windows(2))
        .map(|(p, t)| SaccadeVector::between(p[0], p[1], t[1] - t[0]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaccadeConfig {
    /// Angle bins are centred on multiples of `360 / angle_bins`.
    pub angle_bins: usize,
    /// Increasing lower edges in pixels, starting at 0; the last bin is open.
    pub length_edges: Vec<f64>,
}

impl Default for SaccadeConfig {
    fn default() -> Self {
        Self {
            angle_bins: 8,
            length_edges: vec![0.0, 50.0, 100.0, 200.0, 400.0, 800.0],
        }
    }
}

impl SaccadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.angle_bins == 0 {
            return Err(Error::Config("angle_bins must be positive".into()));
        }
        if self.length_edges.first() != Some(&0.0) {
            return Err(Error::Config("length_edges must start at 0".into()));
        }
        if self.length_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("length_edges must increase".into()));
        }
        Ok(())
    }

    pub fn angle_width(&self) -> f64 {
        360.0 / self.angle_bins as f64
    }

    /// Index of the angle bin containing `angle` degrees.
    pub fn angle_bin(&self, angle: f64) -> usize {
        let w = self.angle_width();
        ((angle + w / 2.0) / w).floor() as usize % self.angle_bins
    }

    pub fn length_bin(&self, length: f64) -> usize {
        self.length_edges.iter().rposition(|e| length >= *e).unwrap_or(0)
    }
}

pub const FIXATION_LABEL: &str = "fixation";

/// One CSV row. `angle_bin_deg` is the bin centre, or `fixation` for
/// zero-length saccades; `length_bin_px` is the lower edge of the bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaccadeRow {
    pub angle_bin_deg: String,
    pub length_bin_px: f64,
    pub mean_speed_px_s: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaccadeTable {
    /// Angle-major, then length; the fixation row is last.
    pub rows: Vec<SaccadeRow>,
}

impl SaccadeTable {
    pub fn fixation(&self) -> &SaccadeRow {
        self.rows.last().expect("fixation row")
    }

    pub fn populated(&self) -> impl Iterator<Item = &SaccadeRow> {
        self.rows.iter().filter(|r| r.count > 0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let want = ["angle_bin_deg", "length_bin_px", "mean_speed_px_s", "count"];
        if header.iter().ne(want) {
            return Err(Error::Validation(format!("unexpected saccade CSV header {header:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<SaccadeRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Bins the saccades of every `(points, timestamps)` trajectory by angle and
/// length and reports the mean speed per bin. Every bin is emitted.
pub fn saccade_analysis(trajs: &[(Vec<Point>, Vec<f64>)], config: &SaccadeConfig) -> Result<SaccadeTable> {
    config.validate()?;
    let nl = config.length_edges.len();
    let mut sums = vec![(0.0, 0usize); config.angle_bins * nl];
    let mut fixations = 0usize;
    for (points, times) in trajs {
        for s in saccades(points, times)? {
            if s.length == 0.0 {
                fixations += 1;
                continue;
            }
            let k = config.angle_bin(s.angle) * nl + config.length_bin(s.length);
            sums[k].0 += s.speed;
            sums[k].1 += 1;
        }
    }
    let mut rows = Vec::with_capacity(sums.len() + 1);
    for a in 0..config.angle_bins {
        for (l, edge) in config.length_edges.iter().enumerate() {
            let (sum, count) = sums[a * nl + l];
            rows.push(SaccadeRow {
                angle_bin_deg: format!("{}", a as f64 * config.angle_width()),
                length_bin_px: *edge,
                mean_speed_px_s: if count > 0 { sum / count as f64 } else { 0.0 },
                count,
            });
        }
    }
    rows.push(SaccadeRow {
        angle_bin_deg: FIXATION_LABEL.into(),
        length_bin_px: 0.0,
        mean_speed_px_s: 0.0,
        count: fixations,
    });
    Ok(SaccadeTable { rows })
}
