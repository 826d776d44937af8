//! Shared raster and geometry types. All rasters are indexed `(row, col)`
//! with the origin at the top-left corner.

use std::collections::{HashSet, VecDeque};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use psam_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `H x W x C` float image with every value finite and inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pixels: Array3<f32>,
}

impl RasterImage {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("image must be non-empty".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidInput(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if let Some(((r, col, ch), v)) = pixels
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "pixel ({r}, {col}, {ch}) = {v} is outside [0, 1]"
            )));
        }
        Ok(Self { pixels })
    }

    /// Constant single- or three-channel image.
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f32> {
        self.pixels.index_axis(Axis(2), c)
    }

    /// Three-channel view of the image; gray images are replicated.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels() == 3 {
            return self.clone();
        }
        let (h, w) = self.dims();
        RasterImage {
            pixels: Array3::from_shape_fn((h, w, 3), |(r, c, _)| self.pixels[[r, c, 0]]),
        }
    }

    /// Mean over channels.
    pub fn to_gray(&self) -> Array2<f32> {
        self.pixels.mean_axis(Axis(2)).unwrap()
    }

    /// Packs images of identical shape into an `NCHW` tensor.
    pub fn batch_tensor(images: &[&RasterImage]) -> Tensor {
        let (h, w) = images[0].dims();
        let c = images[0].channels();
        let mut t = Tensor::zeros((images.len(), c, h, w));
        for (n, img) in images.iter().enumerate() {
            assert_eq!(
                (img.dims(), img.channels()),
                ((h, w), c),
                "batch images differ in shape"
            );
            for ((r, col, ch), v) in img.pixels.indexed_iter() {
                t[[n, ch, r, col]] = *v;
            }
        }
        t
    }

    pub fn to_tensor(&self) -> Tensor {
        Self::batch_tensor(&[self])
    }
}

/// Per-channel min-max scaling into `[0, 1]`. Constant channels map to 0.
pub fn normalize(raw: &Array3<f32>) -> Result<RasterImage> {
    if raw.is_empty() {
        return Err(Error::InvalidInput(
            "cannot normalize an empty raster".into(),
        ));
    }
    if let Some(((r, c, ch), v)) = raw.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "raw pixel ({r}, {c}, {ch}) = {v}"
        )));
    }
    let mut out = raw.clone();
    for mut plane in out.axis_iter_mut(Axis(2)) {
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = hi - lo;
        if range > 0.0 {
            plane.mapv_inplace(|v| ((v - lo) / range).clamp(0.0, 1.0));
        } else {
            plane.fill(0.0);
        }
    }
    RasterImage::new(out)
}

/// Pixel label in a tri-state supervision mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(i8)]
pub enum TriState {
    Ignore = -1,
    Background = 0,
    Foreground = 1,
}

impl TriState {
    pub fn value(self) -> i8 {
        self as i8
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Self::Ignore),
            0 => Some(Self::Background),
            1 => Some(Self::Foreground),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriStateMask {
    pub labels: Array2<TriState>,
}

impl TriStateMask {
    pub fn new(labels: Array2<TriState>) -> Self {
        Self { labels }
    }

    pub fn filled(dims: (usize, usize), value: TriState) -> Self {
        Self {
            labels: Array2::from_elem(dims, value),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn count(&self, state: TriState) -> usize {
        self.labels.iter().filter(|&&l| l == state).count()
    }

    /// Foreground pixels as a boolean mask.
    pub fn foreground(&self) -> Array2<bool> {
        self.labels.mapv(|l| l == TriState::Foreground)
    }
}

/// Instance labels: 0 is background, `1..=n` are instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    labels: Array2<u32>,
    count: u32,
}

impl InstanceMap {
    /// Accepts labels whose positive ids are exactly `1..=n`.
    pub fn new(labels: Array2<u32>) -> Result<Self> {
        let present: HashSet<u32> = labels.iter().copied().filter(|&l| l > 0).collect();
        let count = present.len() as u32;
        if let Some(bad) = present.iter().find(|&&l| l > count) {
            return Err(Error::InvalidInput(format!(
                "instance ids must be contiguous 1..={count}, found id {bad}"
            )));
        }
        Ok(Self { labels, count })
    }

    /// Compacts arbitrary non-negative ids to `1..=n` in row-major order of
    /// first appearance.
    pub fn relabeled(labels: &Array2<u32>) -> Self {
        let mut map = std::collections::HashMap::new();
        let mut next = 0u32;
        let out = labels.mapv(|l| {
            if l == 0 {
                0
            } else {
                *map.entry(l).or_insert_with(|| {
                    next += 1;
                    next
                })
            }
        });
        Self {
            labels: out,
            count: next,
        }
    }

    pub fn empty(dims: (usize, usize)) -> Self {
        Self {
            labels: Array2::zeros(dims),
            count: 0,
        }
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Number of instances.
    pub fn count(&self) -> usize {
        self.count as usize
    }

    pub fn foreground(&self) -> Array2<bool> {
        self.labels.mapv(|l| l > 0)
    }

    /// Pixel count per instance, indexed by `id - 1`.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0usize; self.count()];
        for &l in self.labels.iter().filter(|&&l| l > 0) {
            a[l as usize - 1] += 1;
        }
        a
    }

    /// Mean `(row, col)` per instance, indexed by `id - 1`.
    pub fn centroids(&self) -> Vec<(f64, f64)> {
        let mut acc = vec![(0.0f64, 0.0f64, 0usize); self.count()];
        for ((r, c), &l) in self.labels.indexed_iter() {
            if l > 0 {
                let e = &mut acc[l as usize - 1];
                e.0 += r as f64;
                e.1 += c as f64;
                e.2 += 1;
            }
        }
        acc.into_iter()
            .map(|(r, c, n)| (r / n as f64, c / n as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub row: usize,
    pub col: usize,
}

impl Point {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn dist2(&self, other: &Point) -> i64 {
        let dr = self.row as i64 - other.row as i64;
        let dc = self.col as i64 - other.col as i64;
        dr * dr + dc * dc
    }
}

/// Nuclei centers; coordinates are unique and inside the image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PointSet {
    points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>, dims: (usize, usize)) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, p) in points.iter().enumerate() {
            if p.row >= dims.0 || p.col >= dims.1 {
                return Err(Error::InvalidInput(format!(
                    "point {i} at ({}, {}) lies outside {}x{}",
                    p.row, p.col, dims.0, dims.1
                )));
            }
            if !seen.insert(*p) {
                return Err(Error::InvalidInput(format!(
                    "duplicate point ({}, {})",
                    p.row, p.col
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-pixel foreground probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    values: Array2<f32>,
}

impl ProbabilityMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if let Some(((r, c), v)) = values
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "probability ({r}, {c}) = {v} is outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Labels maximal connected foreground regions `1..=n`, numbered in
/// row-major order of each region's first pixel.
pub fn connected_components(mask: &Array2<bool>, connectivity: Connectivity) -> InstanceMap {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            next += 1;
            labels[[r, c]] = next;
            queue.push_back((r, c));
            while let Some((pr, pc)) = queue.pop_front() {
                for &(dr, dc) in connectivity.offsets() {
                    let (nr, nc) = (pr as isize + dr, pc as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask[[nr, nc]] && labels[[nr, nc]] == 0 {
                        labels[[nr, nc]] = next;
                        queue.push_back((nr, nc));
                    }
                }
            }
        }
    }
    InstanceMap {
        labels,
        count: next,
    }
}
