//! Detection stage: a residual U-Net trained on pseudo masks yields a
//! foreground probability map, which is thresholded into a trimap and
//! searched for nuclei centers; Voronoi labels are rasterized from the
//! centers.

use ndarray::{s, Array2, Array3};
use psam_nn::{state_dict, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::net::{BackbonePreset, ResUnet, UnetSpec};
use crate::raster::{Point, PointSet, ProbabilityMap, RasterImage, TriState, TriStateMask};
use crate::train::{train_loop, LoopConfig};
use crate::{check_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub t_fg: f32,
    pub t_bg: f32,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            t_fg: 0.6,
            t_bg: 0.6,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_fg > 0.0
            && self.t_fg <= 1.0
            && self.t_bg >= 0.0
            && self.t_bg < 1.0
            && self.t_bg <= self.t_fg)
        {
            return Err(Error::InvalidInput(format!(
                "thresholds need 0 <= t_bg ({}) <= t_fg ({}), t_fg in (0, 1], t_bg in [0, 1)",
                self.t_bg, self.t_fg
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeakConfig {
    /// Half-width of the square neighbourhood.
    pub radius: usize,
    /// Peaks below this probability are dropped.
    pub min_prob: f32,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            radius: 5,
            min_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub backbone: BackbonePreset,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 8,
            seed: 0,
            backbone: BackbonePreset::Compact,
        }
    }
}

impl SegTrainConfig {
    pub(crate) fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }
}

pub(crate) fn sigmoid(z: f32) -> f32 {
    (1.0 / (1.0 + (-(z as f64)).exp())) as f32
}

/// Checks that every image is RGB-convertible, equally sized and
/// compatible with the network's downsampling.
pub(crate) fn training_batch_images(
    images: &[RasterImage],
    spec: &UnetSpec,
) -> Result<Vec<RasterImage>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("training set is empty".into()))?;
    let dims = first.dims();
    let m = spec.size_multiple();
    if dims.0 % m != 0 || dims.1 % m != 0 {
        return Err(Error::InvalidInput(format!(
            "training images are {}x{}; sizes must be multiples of {m}",
            dims.0, dims.1
        )));
    }
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            if img.dims() != dims {
                return Err(Error::InvalidInput(format!(
                    "image {i} is {:?}, expected {dims:?}",
                    img.dims()
                )));
            }
            Ok(img.to_rgb())
        })
        .collect()
}

/// Trains the detection network with binary cross-entropy on the
/// non-ignored pixels of `masks`.
pub fn train_ndn(
    images: &[RasterImage],
    masks: &[TriStateMask],
    cfg: &SegTrainConfig,
    config_hash: &str,
) -> Result<Checkpoint> {
    if images.len() != masks.len() {
        return Err(Error::InvalidInput(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    let spec = UnetSpec::from_preset(cfg.backbone);
    let images = training_batch_images(images, &spec)?;
    for (img, m) in images.iter().zip(masks) {
        check_shape(img.dims(), m.dims())?;
    }
    if masks
        .iter()
        .all(|m| m.count(TriState::Ignore) == m.labels.len())
    {
        return Err(Error::InvalidInput(
            "every pseudo-mask pixel is ignored; nothing to learn from".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ResUnet::new(&spec, &mut rng)?;
    let step = |net: &mut ResUnet, batch: &[usize], _: &mut ChaCha8Rng| -> Result<Option<f64>> {
        let supervised: usize = batch
            .iter()
            .map(|&i| masks[i].labels.len() - masks[i].count(TriState::Ignore))
            .sum();
        if supervised == 0 {
            return Ok(None);
        }
        let xs: Vec<&RasterImage> = batch.iter().map(|&i| &images[i]).collect();
        let logits = net.forward(&RasterImage::batch_tensor(&xs), true);
        let mut g = Tensor::zeros(logits.dim());
        let mut loss = 0.0f64;
        let inv = 1.0 / supervised as f64;
        for (s, &i) in batch.iter().enumerate() {
            for ((r, c), &l) in masks[i].labels.indexed_iter() {
                let y = match l {
                    TriState::Foreground => 1.0,
                    TriState::Background => 0.0,
                    TriState::Ignore => continue,
                };
                let z = logits[[s, 0, r, c]] as f64;
                // log(1 + e^-|z|) + max(z, 0) - y z
                loss += (z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()) * inv;
                let p = 1.0 / (1.0 + (-z).exp());
                g[[s, 0, r, c]] = ((p - y) * inv) as f32;
            }
        }
        net.backward(&g);
        Ok(Some(loss))
    };
    let snapshot = |net: &mut ResUnet, log| {
        Checkpoint::new(
            ModelKind::Detection { spec: spec.clone() },
            state_dict(net),
            config_hash,
            cfg.seed,
            log,
        )
    };
    let log = train_loop(
        &mut net,
        images.len(),
        &cfg.loop_config(),
        &mut rng,
        step,
        &snapshot,
    )?;
    Ok(snapshot(&mut net, log))
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        let period = 2 * (n.max(2) - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    }
}

/// Foreground logits at the image's own resolution. Images whose size is not
/// a multiple of the network stride are reflect-padded and cropped back.
pub fn predict_logits(net: &mut ResUnet, image: &RasterImage) -> Result<Array2<f32>> {
    let (h, w) = image.dims();
    let m = net.spec().size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let rgb = image.to_rgb();
    let x = if (ph, pw) == (h, w) {
        rgb.to_tensor()
    } else {
        let px = rgb.pixels();
        let padded = Array3::from_shape_fn((ph, pw, 3), |(r, c, ch)| {
            px[[reflect(r, h), reflect(c, w), ch]]
        });
        RasterImage::new(padded)?.to_tensor()
    };
    let logits = net.forward(&x, false);
    Ok(logits.slice(s![0, 0, ..h, ..w]).to_owned())
}

pub fn predict_probability(net: &mut ResUnet, image: &RasterImage) -> Result<ProbabilityMap> {
    ProbabilityMap::new(predict_logits(net, image)?.mapv(sigmoid))
}

/// `1` where `p > t_fg`, `0` where `p < t_bg`, `-1` otherwise.
pub fn threshold_trimap(prob: &ProbabilityMap, cfg: &ThresholdConfig) -> TriStateMask {
    TriStateMask::new(prob.values().mapv(|p| {
        if p > cfg.t_fg {
            TriState::Foreground
        } else if p < cfg.t_bg {
            TriState::Background
        } else {
            TriState::Ignore
        }
    }))
}

/// Sliding maximum along one axis over a window of half-width `r`
/// (van Herk / Gil-Werman).
fn max_filter_1d(src: &[f32], r: usize, out: &mut [f32]) {
    let win = 2 * r + 1;
    let mut padded = vec![f32::NEG_INFINITY; src.len() + 2 * r];
    padded[r..r + src.len()].copy_from_slice(src);
    let m = padded.len();
    let mut fwd = vec![f32::NEG_INFINITY; m];
    let mut bwd = vec![f32::NEG_INFINITY; m];
    for i in 0..m {
        fwd[i] = if i % win == 0 {
            padded[i]
        } else {
            fwd[i - 1].max(padded[i])
        };
    }
    for i in (0..m).rev() {
        bwd[i] = if i == m - 1 || (i + 1) % win == 0 {
            padded[i]
        } else {
            bwd[i + 1].max(padded[i])
        };
    }
    // Window [i, i + 2r] in padded coordinates is centered on src[i].
    for (i, o) in out.iter_mut().enumerate() {
        *o = bwd[i].max(fwd[i + 2 * r]);
    }
}

fn max_filter(values: &Array2<f32>, r: usize) -> Array2<f32> {
    let (h, w) = values.dim();
    let mut rows = Array2::<f32>::zeros((h, w));
    let mut buf = vec![0.0f32; w.max(h)];
    for i in 0..h {
        let src: Vec<f32> = values.row(i).to_vec();
        max_filter_1d(&src, r, &mut buf[..w]);
        rows.row_mut(i)
            .assign(&ndarray::ArrayView1::from(&buf[..w]));
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for j in 0..w {
        let src: Vec<f32> = rows.column(j).to_vec();
        max_filter_1d(&src, r, &mut buf[..h]);
        out.column_mut(j)
            .assign(&ndarray::ArrayView1::from(&buf[..h]));
    }
    out
}

/// Strict local maxima: `p(m, n)` must exceed every other value in the
/// `(2r+1) x (2r+1)` window clipped at the border, and reach `min_prob`.
/// Plateaus therefore produce no peak.
pub fn local_maxima(prob: &ProbabilityMap, cfg: &PeakConfig) -> Result<PointSet> {
    if cfg.radius == 0 {
        return Err(Error::InvalidInput("peak radius must be >= 1".into()));
    }
    let v = prob.values();
    let (h, w) = v.dim();
    let r = cfg.radius;
    let window_max = max_filter(v, r);
    let mut points = Vec::new();
    for ((m, n), &p) in v.indexed_iter() {
        if p < cfg.min_prob || p < window_max[[m, n]] {
            continue;
        }
        // p equals the window maximum; it is a peak only if unique.
        let unique = (m.saturating_sub(r)..=(m + r).min(h - 1)).all(|i| {
            (n.saturating_sub(r)..=(n + r).min(w - 1)).all(|j| (i, j) == (m, n) || v[[i, j]] < p)
        });
        if unique {
            points.push(Point::new(m, n));
        }
    }
    PointSet::new(points, (h, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoronoiConfig {
    /// Radius of the foreground disk drawn around every seed; 0 keeps bare
    /// seed pixels.
    pub seed_radius: usize,
}

impl Default for VoronoiConfig {
    fn default() -> Self {
        Self { seed_radius: 2 }
    }
}

/// Index of the nearest seed per pixel under squared Euclidean distance, or
/// `None` where two or more seeds are equally near.
pub fn nearest_seed(points: &PointSet, dims: (usize, usize)) -> Array2<Option<u32>> {
    Array2::from_shape_fn(dims, |(r, c)| {
        let px = Point::new(r, c);
        let mut best = i64::MAX;
        let mut owner = None;
        for (i, p) in points.points().iter().enumerate() {
            let d = p.dist2(&px);
            if d < best {
                best = d;
                owner = Some(i as u32);
            } else if d == best {
                owner = None;
            }
        }
        owner
    })
}

/// Voronoi supervision: cell boundaries are background (0), disks around the
/// seeds are foreground (1), everything else is ignored (-1).
///
/// A pixel is a boundary pixel when it is equidistant to several seeds or
/// when one of its 4-neighbours has a different unique nearest seed.
pub fn voronoi_labels(
    points: &PointSet,
    dims: (usize, usize),
    cfg: &VoronoiConfig,
) -> Result<TriStateMask> {
    if points.is_empty() {
        return Err(Error::InvalidInput(
            "Voronoi labels need at least one seed point".into(),
        ));
    }
    if let Some(p) = points
        .points()
        .iter()
        .find(|p| p.row >= dims.0 || p.col >= dims.1)
    {
        return Err(Error::InvalidInput(format!(
            "seed ({}, {}) lies outside the {}x{} raster",
            p.row, p.col, dims.0, dims.1
        )));
    }
    let owner = nearest_seed(points, dims);
    let (h, w) = dims;
    let edge = Array2::from_shape_fn(dims, |(r, c)| {
        let Some(me) = owner[[r, c]] else {
            return true;
        };
        let mut neighbours = [None; 4];
        if r > 0 {
            neighbours[0] = owner[[r - 1, c]];
        }
        if r + 1 < h {
            neighbours[1] = owner[[r + 1, c]];
        }
        if c > 0 {
            neighbours[2] = owner[[r, c - 1]];
        }
        if c + 1 < w {
            neighbours[3] = owner[[r, c + 1]];
        }
        neighbours.iter().flatten().any(|&o| o != me)
    });
    let mut labels = edge.mapv(|e| {
        if e {
            TriState::Background
        } else {
            TriState::Ignore
        }
    });
    let rad = cfg.seed_radius as i64;
    for p in points.points() {
        let (pr, pc) = (p.row as i64, p.col as i64);
        for r in (pr - rad).max(0)..=(pr + rad).min(h as i64 - 1) {
            for c in (pc - rad).max(0)..=(pc + rad).min(w as i64 - 1) {
                let (ru, cu) = (r as usize, c as usize);
                if (r - pr).pow(2) + (c - pc).pow(2) <= rad * rad && !edge[[ru, cu]] {
                    labels[[ru, cu]] = TriState::Foreground;
                }
            }
        }
    }
    Ok(TriStateMask::new(labels))
}
