//! Self-supervised pretraining of the block-structured encoder.
//!
//! The default proxy task is similarity discrimination: an image and an
//! augmented view pass through the same encoder in one batch and the mean
//! absolute difference of their embeddings is minimized. Rotation
//! prediction, contrastive discrimination and mean-pixel regression are
//! available for comparison; `imagenet-pretrained` loads externally supplied
//! weights instead of training (it is not a self-supervised strategy).
//! Mean-pixel regression is known to converge poorly and is excluded from
//! the defaults.

use std::path::PathBuf;

use ndarray::{Array2, Array3, Axis};
use psam_nn::{join, load_state_dict, state_dict, Linear, Param, Parameterized, StateDict, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::net::{Encoder, EncoderSpec, InputNorm};
use crate::raster::RasterImage;
use crate::train::{train_loop, LoopConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyTaskKind {
    Similarity,
    Rotation,
    Contrastive,
    MeanPixel,
    ImagenetPretrained,
}

impl ProxyTaskKind {
    pub const ALL: [ProxyTaskKind; 5] = [
        Self::Similarity,
        Self::Rotation,
        Self::Contrastive,
        Self::MeanPixel,
        Self::ImagenetPretrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Similarity => "similarity",
            Self::Rotation => "rotation",
            Self::Contrastive => "contrastive",
            Self::MeanPixel => "mean-pixel",
            Self::ImagenetPretrained => "imagenet-pretrained",
        }
    }
}

impl std::str::FromStr for ProxyTaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown proxy task `{s}`")))
    }
}

/// Reduction over embedding dimensions in the similarity loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Photometric and mild geometric augmentation producing the second view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Additive brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f32,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f32,
    /// Gaussian blur sigma drawn from `[0, blur_sigma_max]`.
    pub blur_sigma_max: f32,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            blur_sigma_max: 1.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            blur_sigma_max: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
        }
    }

    pub fn hflip_only() -> Self {
        Self {
            hflip_prob: 1.0,
            ..Self::identity()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyTask {
    pub kind: ProxyTaskKind,
    pub reduction: Reduction,
    /// Weight of the hinge on per-dimension embedding spread that keeps the
    /// similarity objective away from the constant-embedding optimum. Zero
    /// disables it.
    pub variance_weight: f32,
    /// Contrastive softmax temperature; negatives are the other samples of
    /// the batch.
    pub temperature: f32,
    pub augment: AugmentConfig,
    /// Encoder state dict (JSON) for `imagenet-pretrained`.
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for ProxyTask {
    fn default() -> Self {
        Self {
            kind: ProxyTaskKind::Similarity,
            reduction: Reduction::Mean,
            variance_weight: 1e-4,
            temperature: 0.5,
            augment: AugmentConfig::default(),
            pretrained_weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            optimizer: Optimizer::Adam,
            batch_size: 16,
            seed: 0,
        }
    }
}

fn flip_cols(px: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = px.dim();
    Array3::from_shape_fn((h, w, c), |(r, col, ch)| px[[r, w - 1 - col, ch]])
}

fn flip_rows(px: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = px.dim();
    Array3::from_shape_fn((h, w, c), |(r, col, ch)| px[[h - 1 - r, col, ch]])
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(px: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (h, w, c) = px.dim();
    let horiz = Array3::<f32>::from_shape_fn((h, w, c), |(r, col, ch)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * px[[r, reflect(col as isize + k as isize - radius, w), ch]])
            .sum::<f32>()
    });
    Array3::from_shape_fn((h, w, c), |(r, col, ch)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * horiz[[reflect(r as isize + k as isize - radius, h), col, ch]])
            .sum::<f32>()
    })
}

/// Random view of `image`, deterministic in `seed`. Steps whose strength is
/// zero leave pixels untouched.
pub fn augment_view(image: &RasterImage, cfg: &AugmentConfig, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = image.pixels().clone();
    if rng.gen_bool(cfg.hflip_prob.clamp(0.0, 1.0)) {
        px = flip_cols(&px);
    }
    if rng.gen_bool(cfg.vflip_prob.clamp(0.0, 1.0)) {
        px = flip_rows(&px);
    }
    if cfg.brightness > 0.0 || cfg.contrast > 0.0 {
        let b = if cfg.brightness > 0.0 {
            rng.gen_range(-cfg.brightness..=cfg.brightness)
        } else {
            0.0
        };
        let k = if cfg.contrast > 0.0 {
            rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
        } else {
            1.0
        };
        let mean = px.mean().unwrap_or(0.0);
        px.mapv_inplace(|v| ((v - mean) * k + mean + b).clamp(0.0, 1.0));
    }
    if cfg.blur_sigma_max > 0.0 {
        let sigma = rng.gen_range(0.0..=cfg.blur_sigma_max);
        if sigma >= 0.1 {
            px = gaussian_blur(&px, sigma).mapv(|v| v.clamp(0.0, 1.0));
        }
    }
    RasterImage::new(px).expect("augmentation keeps pixels in [0, 1]")
}

/// `abs(z_l - z_r)` reduced over dimensions.
pub fn similarity_loss(z_l: &[f32], z_r: &[f32], reduction: Reduction) -> Result<f32> {
    if z_l.len() != z_r.len() || z_l.is_empty() {
        return Err(Error::InvalidInput(format!(
            "embedding lengths differ or are empty: {} vs {}",
            z_l.len(),
            z_r.len()
        )));
    }
    let sum: f32 = z_l.iter().zip(z_r).map(|(a, b)| (a - b).abs()).sum();
    Ok(match reduction {
        Reduction::Mean => sum / z_l.len() as f32,
        Reduction::Sum => sum,
    })
}

/// Sign with `sign(0) == 0`, the subgradient of `|x|` used at ties.
fn sign0(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Rotates counter-clockwise by `quarter_turns * 90` degrees.
pub fn rotate_quarter(image: &RasterImage, quarter_turns: u8) -> RasterImage {
    let mut px = image.pixels().clone();
    for _ in 0..quarter_turns % 4 {
        let (h, w, c) = px.dim();
        px = Array3::from_shape_fn((w, h, c), |(r, col, ch)| px[[col, w - 1 - r, ch]]);
    }
    RasterImage::new(px).expect("rotation preserves pixel values")
}

/// Draws a rotation class from `seed` and applies it.
pub fn rotation_label(image: &RasterImage, seed: u64) -> Result<(RasterImage, u8)> {
    let (h, w) = image.dims();
    if h != w {
        return Err(Error::InvalidInput(format!(
            "rotation task needs square patches, got {h}x{w}"
        )));
    }
    let label = ChaCha8Rng::seed_from_u64(seed).gen_range(0..4u8);
    Ok((rotate_quarter(image, label), label))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Temperature-scaled cross-entropy of picking `positive` among
/// `positive ∪ negatives` by cosine similarity to `anchor`.
pub fn contrastive_loss(
    anchor: &[f32],
    positive: &[f32],
    negatives: &[Vec<f32>],
    temperature: f32,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidInput(
            "contrastive loss needs at least one negative".into(),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::InvalidInput("embedding lengths differ".into()));
    }
    let t = temperature as f64;
    let sp = cosine(anchor, positive) / t;
    let logits: Vec<f64> = std::iter::once(sp)
        .chain(negatives.iter().map(|n| cosine(anchor, n) / t))
        .collect();
    Ok(log_sum_exp(&logits) - sp)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mean_pixel_target(image: &RasterImage) -> f32 {
    image.pixels().iter().map(|&v| v as f64).sum::<f64>() as f32 / image.pixels().len() as f32
}

/// Encoder plus the optional task head that is trained with it.
struct PretrainNet {
    encoder: Encoder,
    head: Option<Linear>,
}

impl Parameterized for PretrainNet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        if let Some(h) = self.head.as_mut() {
            h.visit(&join(prefix, "head"), f);
        }
    }
}

fn rows(t: &Tensor) -> Array2<f32> {
    let (n, d, _, _) = t.dim();
    t.to_shape((n, d)).unwrap().to_owned()
}

fn to_tensor(g: Array2<f32>) -> Tensor {
    let (n, d) = g.dim();
    g.into_shape_with_order((n, d, 1, 1)).unwrap()
}

/// Similarity objective over a `[2B, D]` embedding batch whose first half
/// pairs with the second. Returns the loss and its embedding gradient.
pub(crate) fn similarity_objective(z: &Array2<f32>, task: &ProxyTask) -> (f64, Array2<f32>) {
    let (n, d) = z.dim();
    let b = n / 2;
    let scale = match task.reduction {
        Reduction::Mean => 1.0 / (d * b) as f32,
        Reduction::Sum => 1.0 / b as f32,
    };
    let mut g = Array2::<f32>::zeros((n, d));
    let mut loss = 0.0f64;
    for i in 0..b {
        for k in 0..d {
            let diff = z[[i, k]] - z[[i + b, k]];
            loss += diff.abs() as f64 * scale as f64;
            let s = sign0(diff) * scale;
            g[[i, k]] = s;
            g[[i + b, k]] = -s;
        }
    }
    if task.variance_weight > 0.0 {
        let w = task.variance_weight;
        let mean = z.mean_axis(Axis(0)).unwrap();
        for k in 0..d {
            let var = z
                .column(k)
                .iter()
                .map(|&v| (v - mean[k]).powi(2))
                .sum::<f32>()
                / n as f32;
            let std = (var + 1e-4).sqrt();
            if std < 1.0 {
                loss += (w * (1.0 - std) / d as f32) as f64;
                for i in 0..n {
                    g[[i, k]] -= w / d as f32 * (z[[i, k]] - mean[k]) / (n as f32 * std);
                }
            }
        }
    }
    (loss, g)
}

/// NT-Xent over a `[2B, D]` batch where row `i` and row `i ± B` are views of
/// the same image and every other row is a negative.
pub(crate) fn contrastive_objective(z: &Array2<f32>, temperature: f32) -> (f64, Array2<f32>) {
    let (n, d) = z.dim();
    let b = n / 2;
    let t = temperature as f64;
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            z.row(i)
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(1e-12)
        })
        .collect();
    let u = Array2::from_shape_fn((n, d), |(i, k)| z[[i, k]] as f64 / norms[i]);
    let sim = u.dot(&u.t()) / t;
    let mut m = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    for i in 0..n {
        let p = (i + b) % n;
        let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sim[[i, j]]).collect();
        let lse = log_sum_exp(&others);
        loss += lse - sim[[i, p]];
        for j in (0..n).filter(|&j| j != i) {
            m[[i, j]] = (sim[[i, j]] - lse).exp() - if j == p { 1.0 } else { 0.0 };
        }
    }
    let inv = 1.0 / (n as f64 * t);
    let gu = (&m + &m.t()).dot(&u) * inv;
    let mut g = Array2::<f32>::zeros((n, d));
    for i in 0..n {
        let proj: f64 = (0..d).map(|k| u[[i, k]] * gu[[i, k]]).sum();
        for k in 0..d {
            g[[i, k]] = ((gu[[i, k]] - u[[i, k]] * proj) / norms[i]) as f32;
        }
    }
    (loss / n as f64, g)
}

fn validate_dataset(dataset: &[RasterImage]) -> Result<Vec<RasterImage>> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidInput("pretraining dataset is empty".into()))?;
    let dims = first.dims();
    dataset
        .iter()
        .enumerate()
        .map(|(i, img)| {
            if img.dims() != dims {
                return Err(Error::InvalidInput(format!(
                    "image {i} is {:?}, expected {:?}; extract equal-size patches first",
                    img.dims(),
                    dims
                )));
            }
            Ok(img.to_rgb())
        })
        .collect()
}

/// Reads an encoder state dict (unprefixed names, JSON) for `spec`.
pub fn load_pretrained_encoder(spec: &EncoderSpec, path: &std::path::Path) -> Result<StateDict> {
    let dict: StateDict =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let mut enc = Encoder::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_state_dict(&mut enc, &dict)?;
    Ok(dict)
}

/// Pretrains an encoder on `dataset` under `task`. Unless `spec` already
/// carries an input normalization, the channel statistics of `dataset` are
/// fitted and stored with the encoder.
pub fn pretrain(
    dataset: &[RasterImage],
    task: &ProxyTask,
    spec: &EncoderSpec,
    cfg: &PretrainConfig,
    config_hash: &str,
) -> Result<Checkpoint> {
    if task.kind == ProxyTaskKind::ImagenetPretrained {
        let model = ModelKind::Encoder {
            spec: spec.clone(),
            task: task.kind,
        };
        let path = task.pretrained_weights.as_ref().ok_or_else(|| {
            Error::InvalidInput(
                "imagenet-pretrained needs `pretrained_weights` pointing to an encoder state dict"
                    .into(),
            )
        })?;
        let state = load_pretrained_encoder(spec, path)?
            .into_iter()
            .map(|(k, v)| (format!("encoder.{k}"), v))
            .collect();
        return Ok(Checkpoint::new(
            model,
            state,
            config_hash,
            cfg.seed,
            Vec::new(),
        ));
    }
    let images = validate_dataset(dataset)?;
    if task.kind == ProxyTaskKind::Rotation {
        let (h, w) = images[0].dims();
        if h != w {
            return Err(Error::InvalidInput(format!(
                "rotation task needs square patches, got {h}x{w}"
            )));
        }
    }
    if task.kind == ProxyTaskKind::Contrastive && !(task.temperature > 0.0) {
        return Err(Error::InvalidInput(
            "contrastive temperature must be > 0".into(),
        ));
    }
    if cfg.epochs > 0 && !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidInput("learning rate must be > 0".into()));
    }

    let mut spec = spec.clone();
    if spec.input_norm.is_none() {
        spec.input_norm = Some(InputNorm::fit(&RasterImage::batch_tensor(
            &images.iter().collect::<Vec<_>>(),
        )));
    }
    let model = ModelKind::Encoder {
        spec: spec.clone(),
        task: task.kind,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = Encoder::new(&spec, &mut rng)?;
    let head = match task.kind {
        ProxyTaskKind::Rotation => Some(Linear::new(spec.embedding_dim, 4, &mut rng)),
        ProxyTaskKind::MeanPixel => Some(Linear::new(spec.embedding_dim, 1, &mut rng)),
        _ => None,
    };
    let mut net = PretrainNet { encoder, head };

    let loop_cfg = LoopConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
    };
    let step =
        |net: &mut PretrainNet, batch: &[usize], rng: &mut ChaCha8Rng| -> Result<Option<f64>> {
            match task.kind {
                ProxyTaskKind::Similarity | ProxyTaskKind::Contrastive => {
                    if task.kind == ProxyTaskKind::Contrastive && batch.len() < 2 {
                        return Ok(None);
                    }
                    let mut views = Vec::with_capacity(2 * batch.len());
                    let seeds: Vec<(u64, u64)> =
                        batch.iter().map(|_| (rng.gen(), rng.gen())).collect();
                    for (&i, &(s, _)) in batch.iter().zip(&seeds) {
                        views.push(augment_view(&images[i], &task.augment, s));
                    }
                    for (&i, &(_, s)) in batch.iter().zip(&seeds) {
                        views.push(augment_view(&images[i], &task.augment, s));
                    }
                    let x = RasterImage::batch_tensor(&views.iter().collect::<Vec<_>>());
                    let out = net.encoder.forward(&x, true);
                    let z = rows(&out.embedding);
                    let (loss, g) = if task.kind == ProxyTaskKind::Similarity {
                        similarity_objective(&z, task)
                    } else {
                        contrastive_objective(&z, task.temperature)
                    };
                    net.encoder.backward(&to_tensor(g), 0);
                    Ok(Some(loss))
                }
                ProxyTaskKind::Rotation => {
                    let mut xs = Vec::with_capacity(batch.len());
                    let mut labels = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let (img, label) = rotation_label(&images[i], rng.gen())?;
                        xs.push(img);
                        labels.push(label as usize);
                    }
                    let x = RasterImage::batch_tensor(&xs.iter().collect::<Vec<_>>());
                    let out = net.encoder.forward(&x, true);
                    let head = net.head.as_mut().expect("rotation head");
                    let logits = rows(&head.forward(&out.embedding));
                    let n = batch.len();
                    let mut g = Array2::<f32>::zeros((n, 4));
                    let mut loss = 0.0;
                    for (s, &label) in labels.iter().enumerate() {
                        let l: Vec<f64> = logits.row(s).iter().map(|&v| v as f64).collect();
                        let lse = log_sum_exp(&l);
                        loss += lse - l[label];
                        for k in 0..4 {
                            let p = (l[k] - lse).exp() - if k == label { 1.0 } else { 0.0 };
                            g[[s, k]] = (p / n as f64) as f32;
                        }
                    }
                    let ge = head.backward(&to_tensor(g));
                    net.encoder.backward(&ge, 0);
                    Ok(Some(loss / n as f64))
                }
                ProxyTaskKind::MeanPixel => {
                    let xs: Vec<&RasterImage> = batch.iter().map(|&i| &images[i]).collect();
                    let x = RasterImage::batch_tensor(&xs);
                    let out = net.encoder.forward(&x, true);
                    let head = net.head.as_mut().expect("regression head");
                    let pred = head.forward(&out.embedding);
                    let n = batch.len();
                    let mut g = Tensor::zeros((n, 1, 1, 1));
                    let mut loss = 0.0;
                    for (s, img) in xs.iter().enumerate() {
                        let diff = pred[[s, 0, 0, 0]] - mean_pixel_target(img);
                        loss += (diff * diff) as f64;
                        g[[s, 0, 0, 0]] = 2.0 * diff / n as f32;
                    }
                    let ge = head.backward(&g);
                    net.encoder.backward(&ge, 0);
                    Ok(Some(loss / n as f64))
                }
                ProxyTaskKind::ImagenetPretrained => unreachable!("handled before training"),
            }
        };
    let snapshot = |net: &mut PretrainNet, log| {
        Checkpoint::new(model.clone(), state_dict(net), config_hash, cfg.seed, log)
    };
    let log = train_loop(&mut net, images.len(), &loop_cfg, &mut rng, step, &snapshot)?;
    Ok(snapshot(&mut net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BlockSpec, EncoderPreset};
    use proptest::prelude::*;
    use rand::Rng;

    fn asym_image() -> RasterImage {
        RasterImage::new(Array3::from_shape_fn((6, 6, 3), |(r, c, ch)| {
            ((r * 7 + c * 3 + ch) % 11) as f32 / 10.0
        }))
        .unwrap()
    }

    fn tiny_spec() -> EncoderSpec {
        EncoderSpec {
            preset: EncoderPreset::Compact,
            in_channels: 3,
            blocks: vec![
                BlockSpec {
                    width: 4,
                    depth: 1,
                    stride: 1,
                },
                BlockSpec {
                    width: 8,
                    depth: 1,
                    stride: 2,
                },
            ],
            embedding_dim: 8,
            stem_stride: 1,
            input_norm: None,
        }
    }

    #[test]
    fn augmentation_contracts() {
        let img = asym_image();
        assert_eq!(augment_view(&img, &AugmentConfig::identity(), 3), img);
        let cfg = AugmentConfig::default();
        assert_eq!(augment_view(&img, &cfg, 9), augment_view(&img, &cfg, 9));
        let flipped = augment_view(&img, &AugmentConfig::hflip_only(), 1);
        let (h, w) = img.dims();
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    assert_eq!(
                        flipped.pixels()[[r, c, ch]],
                        img.pixels()[[r, w - 1 - c, ch]]
                    );
                }
            }
        }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(
            similarity_loss(&[1.0, 2.0], &[0.0, 4.0], Reduction::Mean).unwrap(),
            1.5
        );
        assert_eq!(
            similarity_loss(&[1.0, 2.0], &[1.0, 2.0], Reduction::Mean).unwrap(),
            0.0
        );
        assert!(similarity_loss(&[1.0], &[1.0, 2.0], Reduction::Mean).is_err());
    }

    #[test]
    fn rotations_compose() {
        let img = asym_image();
        assert_eq!(rotate_quarter(&img, 0), img);
        assert_eq!(rotate_quarter(&rotate_quarter(&img, 2), 2), img);
        assert_eq!(rotate_quarter(&rotate_quarter(&img, 1), 3), img);
        let (rot, label) = rotation_label(&img, 17).unwrap();
        assert_eq!(rot, rotate_quarter(&img, label));
        let rect = RasterImage::filled(4, 6, 3, 0.5).unwrap();
        assert!(rotation_label(&rect, 0).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let a = vec![1.0, 0.0, 0.0];
        let negs = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let good = contrastive_loss(&a, &a, &negs, 0.05).unwrap();
        assert!(good < 1e-6, "{good}");
        let bad = contrastive_loss(&a, &[0.0, 1.0, 0.0], &[a.clone(), a.clone()], 0.05).unwrap();
        assert!(bad > good);
        let rev: Vec<_> = negs.iter().rev().cloned().collect();
        assert_eq!(
            contrastive_loss(&a, &[0.3, 0.2, 0.1], &negs, 0.5).unwrap(),
            contrastive_loss(&a, &[0.3, 0.2, 0.1], &rev, 0.5).unwrap()
        );
        assert!(contrastive_loss(&a, &a, &[], 0.5).is_err());
    }

    #[test]
    fn batch_contrastive_matches_pairwise_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0f32..1.0));
        let (loss, g) = contrastive_objective(&z, 0.5);
        let row = |i: usize| z.row(i).to_vec();
        let mut expect = 0.0;
        for i in 0..6 {
            let negs: Vec<_> = (0..6)
                .filter(|&j| j != i && j != (i + 3) % 6)
                .map(row)
                .collect();
            expect += contrastive_loss(&row(i), &row((i + 3) % 6), &negs, 0.5).unwrap();
        }
        assert!((loss - expect / 6.0).abs() < 1e-9);
        // finite-difference check of the analytic gradient
        let eps = 1e-3f32;
        for (i, k) in [(0, 0), (2, 3), (5, 4)] {
            let mut p = z.clone();
            p[[i, k]] += eps;
            let mut m = z.clone();
            m[[i, k]] -= eps;
            let fd = (contrastive_objective(&p, 0.5).0 - contrastive_objective(&m, 0.5).0)
                / (2.0 * eps as f64);
            assert!(
                (fd - g[[i, k]] as f64).abs() < 1e-3,
                "fd {fd} vs {}",
                g[[i, k]]
            );
        }
    }

    #[test]
    fn mean_pixel_examples() {
        assert_eq!(
            mean_pixel_target(&RasterImage::filled(4, 4, 3, 0.5).unwrap()),
            0.5
        );
        assert_eq!(
            mean_pixel_target(&RasterImage::filled(4, 4, 1, 0.0).unwrap()),
            0.0
        );
        let half =
            RasterImage::new(Array3::from_shape_fn((2, 2, 1), |(r, _, _)| r as f32)).unwrap();
        assert_eq!(mean_pixel_target(&half), 0.5);
    }

    #[test]
    fn identity_views_give_zero_gradient() {
        let images: Vec<RasterImage> = (0..4)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                RasterImage::new(Array3::from_shape_fn((8, 8, 3), |_| {
                    rng.gen_range(0.0..1.0)
                }))
                .unwrap()
            })
            .collect();
        let task = ProxyTask {
            augment: AugmentConfig::identity(),
            variance_weight: 0.0,
            ..ProxyTask::default()
        };
        let mut enc = Encoder::new(&tiny_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let views: Vec<&RasterImage> = images.iter().chain(images.iter()).collect();
        let out = enc.forward(&RasterImage::batch_tensor(&views), true);
        let (loss, g) = similarity_objective(&rows(&out.embedding), &task);
        assert_eq!(loss, 0.0);
        psam_nn::zero_grad(&mut enc);
        enc.backward(&to_tensor(g), 0);
        let mut norm = 0.0f64;
        enc.visit("", &mut |_, p| {
            norm += p.grad.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
        });
        assert!(norm.sqrt() < 1e-6, "gradient norm {}", norm.sqrt());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let images = vec![RasterImage::filled(8, 8, 3, 0.3).unwrap(); 3];
        let cfg = PretrainConfig {
            epochs: 0,
            seed: 11,
            ..PretrainConfig::default()
        };
        let ckpt = pretrain(&images, &ProxyTask::default(), &tiny_spec(), &cfg, "h").unwrap();
        let mut enc = Encoder::new(&tiny_spec(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(ckpt.sub_state("encoder"), state_dict(&mut enc));
        assert!(ckpt.log.is_empty());
    }

    #[test]
    fn every_task_trains_deterministically() {
        let images: Vec<RasterImage> = (0..6)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                RasterImage::new(Array3::from_shape_fn((8, 8, 3), |_| {
                    rng.gen_range(0.0..1.0)
                }))
                .unwrap()
            })
            .collect();
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            ..PretrainConfig::default()
        };
        for kind in [
            ProxyTaskKind::Similarity,
            ProxyTaskKind::Rotation,
            ProxyTaskKind::Contrastive,
            ProxyTaskKind::MeanPixel,
        ] {
            let task = ProxyTask {
                kind,
                ..ProxyTask::default()
            };
            let a = pretrain(&images, &task, &tiny_spec(), &cfg, "h").unwrap();
            let b = pretrain(&images, &task, &tiny_spec(), &cfg, "h").unwrap();
            assert_eq!(a.log.len(), 2);
            assert!(a.log.iter().all(|e| e.loss.is_finite()), "{kind:?}");
            assert_eq!(a, b, "{kind:?}");
        }
    }

    #[test]
    fn pretrained_weights_are_loaded_not_trained() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut enc = Encoder::new(&tiny_spec(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dict = state_dict(&mut enc);
        std::fs::write(&path, serde_json::to_string(&dict).unwrap()).unwrap();
        let task = ProxyTask {
            kind: ProxyTaskKind::ImagenetPretrained,
            pretrained_weights: Some(path),
            ..ProxyTask::default()
        };
        let ckpt = pretrain(&[], &task, &tiny_spec(), &PretrainConfig::default(), "h").unwrap();
        assert_eq!(ckpt.sub_state("encoder"), dict);
        let missing = ProxyTask {
            kind: ProxyTaskKind::ImagenetPretrained,
            ..ProxyTask::default()
        };
        assert!(pretrain(&[], &missing, &tiny_spec(), &PretrainConfig::default(), "h").is_err());
    }

    proptest! {
        #[test]
        fn similarity_is_a_pseudometric(
            a in proptest::collection::vec(-5.0f32..5.0, 1..16),
            b_seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(b_seed);
            let b: Vec<f32> = a.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
            let ab = similarity_loss(&a, &b, Reduction::Mean).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, similarity_loss(&b, &a, Reduction::Mean).unwrap());
            prop_assert_eq!(similarity_loss(&a, &a, Reduction::Mean).unwrap(), 0.0);
        }

        #[test]
        fn quarter_turns_invert(seed in 0u64..1000, k in 0u8..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = RasterImage::new(Array3::from_shape_fn((5, 5, 3), |_| rng.gen_range(0.0..1.0))).unwrap();
            prop_assert_eq!(rotate_quarter(&rotate_quarter(&img, k), (4 - k) % 4), img);
        }
    }
}
