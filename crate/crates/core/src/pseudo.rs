//! Pseudo-mask generation: fuse the colorized activation map with the raw
//! image, cluster pixel colors with K-Means (K = 3) and map clusters to
//! foreground / ignore / background by their mean red value.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::net::Encoder;
use crate::raster::{normalize, RasterImage, TriState, TriStateMask};
use crate::saliency::{activation_with_encoder, colorize_heatmap, ActivationMap, SaliencyConfig};
use crate::{Error, Result};

/// Fused images whose per-channel variance stays below this are treated as
/// structureless.
pub const DEGENERATE_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Weight of the raw image (detail enhancement ratio).
    pub beta: f32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { beta: 2.5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Fate of the cluster whose mean red lies between the other two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiddleCluster {
    #[default]
    Ignore,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 3,
            seed: 0,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub beta: f32,
    pub middle: MiddleCluster,
    pub kmeans: KMeansConfig,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            beta: FusionConfig::default().beta,
            middle: MiddleCluster::Ignore,
            kmeans: KMeansConfig::default(),
        }
    }
}

impl PseudoConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig { beta: self.beta }
    }
}

/// `normalize(activation + beta * raw)`, per channel.
pub fn fuse(
    activation: &RasterImage,
    raw: &RasterImage,
    cfg: &FusionConfig,
) -> Result<RasterImage> {
    cfg.validate()?;
    if activation.channels() != 3 {
        return Err(Error::InvalidInput(
            "fusion expects a colorized 3-channel activation map".into(),
        ));
    }
    crate::check_shape(activation.dims(), raw.dims())?;
    let raw = raw.to_rgb();
    let mut sum = activation.pixels().clone();
    sum.zip_mut_with(raw.pixels(), |a, &r| *a += cfg.beta * r);
    normalize(&sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Cluster id per feature row.
    pub assignments: Vec<usize>,
    /// `[K, D]`
    pub centroids: Array2<f64>,
    /// Sum of squared distances of every row to its own centroid.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn dist2(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Spread-maximizing seeding: the first center is uniform, each further
/// center is drawn with probability proportional to its squared distance
/// from the nearest chosen center.
fn seed_centers(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut d: Vec<f64> = (0..n).map(|i| dist2(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if target < di {
                    chosen = i;
                    break;
                }
                target -= di;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, di) in d.iter_mut().enumerate() {
            *di = di.min(dist2(x.row(i), x.row(pick)));
        }
    }
    centers
}

fn assign(x: ArrayView2<f64>, centers: &Array2<f64>, out: &mut [usize]) {
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (c, center) in centers.axis_iter(Axis(0)).enumerate() {
            let d = dist2(row, center);
            if d < best.0 {
                best = (d, c);
            }
        }
        out[i] = best.1;
    }
}

fn inertia(x: ArrayView2<f64>, centers: &Array2<f64>, assignments: &[usize]) -> f64 {
    x.axis_iter(Axis(0))
        .zip(assignments)
        .map(|(row, &a)| dist2(row, centers.row(a)))
        .sum()
}

/// Moves, for every empty cluster, the point farthest from its own centroid
/// (among clusters with more than one member) into that cluster.
fn reseed_empty(x: ArrayView2<f64>, centers: &Array2<f64>, assignments: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..x.nrows())
            .filter(|&i| sizes[assignments[i]] > 1)
            .map(|i| (dist2(x.row(i), centers.row(assignments[i])), i))
            .fold((f64::NEG_INFINITY, 0), |best, cur| {
                if cur.0 > best.0 {
                    cur
                } else {
                    best
                }
            });
        assignments[far.1] = empty;
    }
}

fn update_centers(x: ArrayView2<f64>, assignments: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &a) in x.axis_iter(Axis(0)).zip(assignments) {
        let mut s = sums.row_mut(a);
        s += &row;
        counts[a] += 1;
    }
    for (mut s, &c) in sums.axis_iter_mut(Axis(0)).zip(&counts) {
        s /= c as f64;
    }
    sums
}

/// Lloyd's algorithm from a seeded spread-maximizing initialization. Stops
/// once no centroid moves by `tol` or more (Euclidean) or after `max_iter`
/// iterations.
pub fn kmeans(
    features: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterResult> {
    let n = features.nrows();
    if k < 2 {
        return Err(Error::InvalidInput(format!("K must be >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidInput(format!(
            "K = {k} exceeds the {n} available points"
        )));
    }
    if let Some(v) = features.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("K-Means feature {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(features, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        assign(features, &centers, &mut assignments);
        reseed_empty(features, &centers, &mut assignments, k);
        let next = update_centers(features, &assignments, k);
        let shift = centers
            .axis_iter(Axis(0))
            .zip(next.axis_iter(Axis(0)))
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        history.push(inertia(features, &centers, &assignments));
        if shift < tol {
            break;
        }
    }
    Ok(ClusterResult {
        inertia: *history.last().expect("at least one iteration"),
        assignments,
        centroids: centers,
        history,
        iterations,
    })
}

/// Maps clusters of a row-major pixel clustering of `fused` to tri-state
/// labels. Clusters are ranked by mean red value; the reddest is
/// foreground, the least red background and any others follow `middle`.
/// Equal means rank the larger cluster as more background-like, then the
/// cluster whose first pixel comes later in row-major order.
pub fn reassign_labels(
    clusters: &ClusterResult,
    fused: &RasterImage,
    middle: MiddleCluster,
) -> Result<TriStateMask> {
    let (h, w) = fused.dims();
    if clusters.assignments.len() != h * w {
        return Err(Error::InvalidInput(format!(
            "{} assignments for a {h}x{w} image",
            clusters.assignments.len()
        )));
    }
    if fused.channels() != 3 {
        return Err(Error::InvalidInput(
            "label reassignment needs a 3-channel fused image".into(),
        ));
    }
    let k = clusters.k();
    let red = fused.channel(0);
    let mut sum = vec![0.0f64; k];
    let mut size = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (idx, (&a, &r)) in clusters.assignments.iter().zip(red.iter()).enumerate() {
        sum[a] += r as f64;
        size[a] += 1;
        first[a] = first[a].min(idx);
    }
    let mut order: Vec<usize> = (0..k).filter(|&c| size[c] > 0).collect();
    let mean = |c: usize| sum[c] / size[c] as f64;
    order.sort_by(|&a, &b| {
        mean(a)
            .total_cmp(&mean(b))
            .then(size[b].cmp(&size[a]))
            .then(first[b].cmp(&first[a]))
    });
    let mut state = vec![TriState::Background; k];
    let middle_state = match middle {
        MiddleCluster::Ignore => TriState::Ignore,
        MiddleCluster::Background => TriState::Background,
    };
    for (rank, &c) in order.iter().enumerate() {
        state[c] = if rank + 1 == order.len() {
            TriState::Foreground
        } else if rank == 0 {
            TriState::Background
        } else {
            middle_state
        };
    }
    let labels = Array2::from_shape_fn((h, w), |(r, c)| state[clusters.assignments[r * w + c]]);
    Ok(TriStateMask::new(labels))
}

fn is_degenerate(fused: &RasterImage) -> bool {
    fused.pixels().axis_iter(Axis(2)).all(|plane| {
        let n = plane.len() as f64;
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        plane
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n
            < DEGENERATE_VARIANCE
    })
}

/// Fusion, clustering and reassignment for a precomputed activation map.
pub fn pseudo_mask_from_activation(
    activation: &ActivationMap,
    image: &RasterImage,
    cfg: &PseudoConfig,
) -> Result<TriStateMask> {
    let colored = colorize_heatmap(activation);
    let fused = fuse(&colored, image, &cfg.fusion())?;
    let (h, w) = fused.dims();
    if is_degenerate(&fused) {
        return Ok(TriStateMask::filled((h, w), TriState::Background));
    }
    let features = fused
        .pixels()
        .to_shape((h * w, 3))
        .expect("contiguous fused image")
        .mapv(|v| v as f64);
    let km = &cfg.kmeans;
    let clusters = kmeans(features.view(), km.k, km.seed, km.max_iter, km.tol)?;
    reassign_labels(&clusters, &fused, cfg.middle)
}

/// Pseudo mask with an already built encoder.
pub fn pseudo_mask_with_encoder(
    encoder: &mut Encoder,
    image: &RasterImage,
    saliency: &SaliencyConfig,
    cfg: &PseudoConfig,
) -> Result<TriStateMask> {
    let map = activation_with_encoder(encoder, image, saliency.selector(), saliency.scalar)?;
    pseudo_mask_from_activation(&map, image, cfg)
}

/// Activation map, colorization, fusion, K-Means and reassignment.
pub fn generate_pseudo_mask(
    checkpoint: &Checkpoint,
    image: &RasterImage,
    saliency: &SaliencyConfig,
    cfg: &PseudoConfig,
) -> Result<TriStateMask> {
    let mut encoder = checkpoint.build_encoder()?;
    pseudo_mask_with_encoder(&mut encoder, image, saliency, cfg)
}
