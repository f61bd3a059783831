//! Point annotations and the maps derived from them.
//!
//! A [`PointSet`] holds one pixel per annotated object (its mass center). Points are
//! rendered into Gaussian [`Heatmap`]s for center regression and recovered from
//! predicted heatmaps with [`detect_peaks`].

use std::collections::HashSet;

use image::{ImageBuffer, Luma};
use imageproc::region_labelling::{connected_components, Connectivity};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussians are cut off beyond this many bandwidths, like any finite convolution kernel.
pub const TRUNCATE_SIGMAS: f64 = 3.0;

/// Default detection threshold for [`detect_peaks`].
pub const DEFAULT_PEAK_THRESHOLD: f32 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub row: usize,
    pub col: usize,
}

impl Point {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn chebyshev(&self, other: &Point) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        dr * dr + dc * dc
    }
}

/// A set of annotated pixels inside an `height x width` image.
///
/// Points are unique and in bounds. Order is preserved as given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<Point>,
    height: usize,
    width: usize,
}

impl PointSet {
    pub fn new(points: Vec<Point>, height: usize, width: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if p.row >= height || p.col >= width {
                return Err(Error::Validation(format!(
                    "point ({}, {}) outside {height}x{width} image",
                    p.row, p.col
                )));
            }
            if !seen.insert(*p) {
                return Err(Error::Validation(format!("duplicate point ({}, {})", p.row, p.col)));
            }
        }
        Ok(Self { points, height, width })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            points: Vec::new(),
            height,
            width,
        }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &Point> {
        self.points.iter()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.points.contains(p)
    }

    /// Returns the same points sorted row-major; used for order-insensitive comparison.
    pub fn sorted(&self) -> Vec<Point> {
        let mut v = self.points.clone();
        v.sort();
        v
    }

    /// Number of points inside the window with top-left `(row, col)` and side `size`.
    pub fn count_in_window(&self, row: usize, col: usize, size: usize) -> usize {
        self.points.iter().filter(|p| in_window(p, row, col, size)).count()
    }
}

pub(crate) fn in_window(p: &Point, row: usize, col: usize, size: usize) -> bool {
    p.row >= row && p.row < row + size && p.col >= col && p.col < col + size
}

/// Dense per-pixel map peaking at object centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap(pub Array2<f32>);

impl Heatmap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Heatmap(Array2::zeros((height, width)))
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn scaled(mut self, factor: f32) -> Self {
        self.0.mapv_inplace(|v| v * factor);
        self
    }
}

/// Dense instance labelling: 0 is background, `1..=N` are instances.
///
/// Ids are contiguous and every instance is a single 4-connected region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    labels: Array2<u32>,
    count: usize,
}

impl InstanceMap {
    pub fn new(labels: Array2<u32>) -> Result<Self> {
        let count = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut present = vec![false; count + 1];
        for &v in labels.iter() {
            present[v as usize] = true;
        }
        if let Some(missing) = (1..=count).find(|&id| !present[id]) {
            return Err(Error::Validation(format!(
                "instance ids are not contiguous: id {missing} missing below max {count}"
            )));
        }
        // Equal-valued 4-connected regions; each id must form exactly one of them.
        let (h, w) = labels.dim();
        let img: ImageBuffer<Luma<u32>, Vec<u32>> =
            ImageBuffer::from_raw(w as u32, h as u32, labels.iter().copied().collect())
                .expect("buffer length matches dimensions");
        let regions = connected_components(&img, Connectivity::Four, Luma([0u32]));
        let n_regions = regions.pixels().map(|p| p.0[0]).max().unwrap_or(0) as usize;
        if n_regions != count {
            return Err(Error::Validation(format!(
                "{count} instance ids but {n_regions} 4-connected regions"
            )));
        }
        Ok(Self { labels, count })
    }

    /// Wraps labels already known to satisfy the invariants.
    pub(crate) fn from_raw(labels: Array2<u32>, count: usize) -> Self {
        Self { labels, count }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            labels: Array2::zeros((height, width)),
            count: 0,
        }
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn foreground(&self) -> Array2<bool> {
        self.labels.mapv(|v| v > 0)
    }

    /// Pixel area of every instance, indexed by id (index 0 is background).
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.count + 1];
        for &v in self.labels.iter() {
            areas[v as usize] += 1;
        }
        areas
    }
}

/// One point per instance at its mass center.
///
/// The centroid is rounded to the nearest pixel; if that pixel is not part of the
/// instance (concave shapes) the nearest instance pixel is used instead, ties going
/// to the first pixel in row-major order.
pub fn instance_centers(inst: &InstanceMap) -> PointSet {
    let (h, w) = inst.dim();
    let n = inst.count();
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); n + 1];
    for ((r, c), &id) in inst.labels().indexed_iter() {
        if id > 0 {
            let s = &mut sums[id as usize];
            s.0 += r as f64;
            s.1 += c as f64;
            s.2 += 1;
        }
    }
    let mut points = Vec::with_capacity(n);
    for (id, &(sr, sc, cnt)) in sums.iter().enumerate().skip(1) {
        let (cr, cc) = (sr / cnt as f64, sc / cnt as f64);
        let (rr, rc) = (cr.round() as usize, cc.round() as usize);
        if rr < h && rc < w && inst.labels()[[rr, rc]] == id as u32 {
            points.push(Point::new(rr, rc));
            continue;
        }
        let mut best: Option<(f64, Point)> = None;
        for ((r, c), &v) in inst.labels().indexed_iter() {
            if v != id as u32 {
                continue;
            }
            let d = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, Point::new(r, c)));
            }
        }
        if let Some((_, p)) = best {
            points.push(p);
        }
    }
    PointSet {
        points,
        height: h,
        width: w,
    }
}

/// Uniformly samples `round(ratio * N)` points (at least one when `N > 0` and
/// `ratio > 0`). The subset keeps the input order and depends only on `seed`.
pub fn sample_sparse_points(full: &PointSet, ratio: f64, seed: u64) -> Result<PointSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "annotation ratio {ratio} outside [0, 1]"
        )));
    }
    let n = full.len();
    let mut k = (ratio * n as f64).round() as usize;
    if n > 0 && ratio > 0.0 {
        k = k.max(1);
    }
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(PointSet {
        points: idx.into_iter().map(|i| full.points[i]).collect(),
        height: full.height,
        width: full.width,
    })
}

/// Max-combination of unit-peak Gaussians with bandwidth `sigma` at every point.
pub fn render_heatmap(pts: &PointSet, sigma: f64) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let (h, w) = (pts.height(), pts.width());
    let mut out = Array2::<f32>::zeros((h, w));
    let radius = (TRUNCATE_SIGMAS * sigma).floor() as isize;
    let r2max = (TRUNCATE_SIGMAS * sigma).powi(2);
    let denom = 2.0 * sigma * sigma;
    for p in pts.iter() {
        let (pr, pc) = (p.row as isize, p.col as isize);
        let r0 = (pr - radius).max(0);
        let r1 = (pr + radius).min(h as isize - 1);
        let c0 = (pc - radius).max(0);
        let c1 = (pc + radius).min(w as isize - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d2 = ((r - pr).pow(2) + (c - pc).pow(2)) as f64;
                if d2 > r2max {
                    continue;
                }
                let v = (-d2 / denom).exp() as f32;
                let cell = &mut out[[r as usize, c as usize]];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Heatmap(out)
}

/// Local maxima at or above `threshold`, greedily suppressed so that no two kept peaks
/// are within `min_distance` (Chebyshev) of each other.
///
/// Output is ordered by descending value, ties row-major.
pub fn detect_peaks(h: &Heatmap, threshold: f32, min_distance: usize) -> PointSet {
    let v = h.values();
    let (rows, cols) = v.dim();
    let mut candidates = Vec::new();
    for ((r, c), &x) in v.indexed_iter() {
        if x < threshold || !x.is_finite() {
            continue;
        }
        let mut is_max = true;
        'nb: for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                if v[[nr as usize, nc as usize]] > x {
                    is_max = false;
                    break 'nb;
                }
            }
        }
        if is_max {
            candidates.push((x, Point::new(r, c)));
        }
    }
    // Stable sort keeps row-major order among equal values.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kept: Vec<Point> = Vec::new();
    for (_, p) in candidates {
        if kept.iter().all(|q| q.chebyshev(&p) > min_distance) {
            kept.push(p);
        }
    }
    PointSet {
        points: kept,
        height: rows,
        width: cols,
    }
}
