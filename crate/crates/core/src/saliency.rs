//! Prior self-activation maps: gradient-weighted aggregation of one encoder
//! block's feature maps.
//!
//! For block `L` with post-activation maps `A^k` (`k = 1..K`, each `h x w`)
//! and a scalar `z` computed from the embedding,
//!
//! ```text
//! alpha_k = (1/N) * sum_ij dz/dA^k_ij        N = h * w
//! map     = ReLU(sum_k alpha_k * A^k)
//! ```
//!
//! The map is bilinearly upsampled to the input size and min-max normalized.
//! Any other fixed `N` rescales every `alpha_k` equally and leaves the
//! normalized map unchanged.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use psam_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::net::Encoder;
use crate::raster::RasterImage;
use crate::{Error, Result};

/// 1-based encoder block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelector {
    pub block_index: usize,
}

impl Default for LayerSelector {
    fn default() -> Self {
        Self { block_index: 1 }
    }
}

impl LayerSelector {
    pub fn new(block_index: usize) -> Self {
        Self { block_index }
    }

    pub fn validate(&self, block_count: usize) -> Result<()> {
        if self.block_index == 0 || self.block_index > block_count {
            return Err(Error::InvalidInput(format!(
                "layer {} out of range 1..={block_count}",
                self.block_index
            )));
        }
        Ok(())
    }
}

/// Which scalar of the embedding is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarOutput {
    /// Sum of the embedding entries.
    #[default]
    EmbeddingSum,
    /// Euclidean norm of the embedding.
    EmbeddingNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    /// 1-based block index.
    pub layer: usize,
    pub scalar: ScalarOutput,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            layer: 1,
            scalar: ScalarOutput::EmbeddingSum,
        }
    }
}

impl SaliencyConfig {
    pub fn selector(&self) -> LayerSelector {
        LayerSelector::new(self.layer)
    }
}

/// Rectified activation at input resolution plus its min-max normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    values: Array2<f32>,
    normalized: Array2<f32>,
}

impl ActivationMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if let Some(((r, c), v)) = values
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidInput(format!(
                "activation ({r}, {c}) = {v} is negative or non-finite"
            )));
        }
        let normalized = min_max(&values);
        Ok(Self { values, normalized })
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn normalized_values(&self) -> &Array2<f32> {
        &self.normalized
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Scales into `[0, 1]`; a constant map becomes all zeros.
pub fn min_max(map: &Array2<f32>) -> Array2<f32> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if range > 0.0 {
        map.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
    } else {
        Array2::zeros(map.dim())
    }
}

/// `alpha_k = (1/n) * sum_ij grad[k, i, j]`.
pub fn activation_weights(
    features: ArrayView3<f32>,
    gradients: ArrayView3<f32>,
    n: usize,
) -> Result<Vec<f32>> {
    if features.dim() != gradients.dim() {
        return Err(Error::InvalidInput(format!(
            "gradient shape {:?} differs from feature shape {:?}",
            gradients.dim(),
            features.dim()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidInput("normalizer N must be positive".into()));
    }
    if let Some(((k, i, j), v)) = gradients.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient ({k}, {i}, {j}) = {v}")));
    }
    Ok(gradients
        .axis_iter(Axis(0))
        .map(|g| (g.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
        .collect())
}

/// `ReLU(sum_k alpha_k A^k)`.
pub fn weighted_map(features: ArrayView3<f32>, alpha: &[f32]) -> Array2<f32> {
    let (k, h, w) = features.dim();
    assert_eq!(k, alpha.len(), "one weight per feature map");
    let mut acc = Array2::<f64>::zeros((h, w));
    for (a, plane) in alpha.iter().zip(features.axis_iter(Axis(0))) {
        acc.zip_mut_with(&plane, |s, &v| *s += *a as f64 * v as f64);
    }
    acc.mapv(|v| v.max(0.0) as f32)
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn upsample_bilinear(map: &Array2<f32>, dims: (usize, usize)) -> Array2<f32> {
    let (h, w) = map.dim();
    if (h, w) == dims {
        return map.clone();
    }
    let axis = |out: usize, size: usize| -> Vec<(usize, usize, f64)> {
        let scale = size as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(size - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(dims.0, h);
    let cols = axis(dims.1, w);
    Array2::from_shape_fn(dims, |(r, c)| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = map[[r0, c0]] as f64 * (1.0 - fc) + map[[r0, c1]] as f64 * fc;
        let bottom = map[[r1, c0]] as f64 * (1.0 - fc) + map[[r1, c1]] as f64 * fc;
        (top * (1.0 - fr) + bottom * fr) as f32
    })
}

/// Scalar `z` and `dz/d embedding` for one embedding row.
fn scalar_gradient(embedding: &[f32], scalar: ScalarOutput) -> Vec<f32> {
    match scalar {
        ScalarOutput::EmbeddingSum => vec![1.0; embedding.len()],
        ScalarOutput::EmbeddingNorm => {
            let norm = embedding
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                vec![0.0; embedding.len()]
            } else {
                embedding
                    .iter()
                    .map(|&v| (v as f64 / norm) as f32)
                    .collect()
            }
        }
    }
}

/// Feature maps of the selected block and `dz/dA` for a single image.
pub fn block_features_and_gradients(
    encoder: &mut Encoder,
    image: &RasterImage,
    layer: LayerSelector,
    scalar: ScalarOutput,
) -> Result<(Array3<f32>, Array3<f32>)> {
    layer.validate(encoder.block_count())?;
    let x = image.to_rgb().to_tensor();
    let out = encoder.forward(&x, false);
    let emb: Vec<f32> = out.embedding.iter().copied().collect();
    let g = scalar_gradient(&emb, scalar);
    let g = Tensor::from_shape_vec((1, g.len(), 1, 1), g).expect("embedding gradient shape");
    let grad = encoder.backward(&g, layer.block_index);
    let feats = out.features[layer.block_index - 1]
        .index_axis(Axis(0), 0)
        .to_owned();
    Ok((feats, grad.index_axis(Axis(0), 0).to_owned()))
}

/// Self-activation map of `image` with an already built encoder.
pub fn activation_with_encoder(
    encoder: &mut Encoder,
    image: &RasterImage,
    layer: LayerSelector,
    scalar: ScalarOutput,
) -> Result<ActivationMap> {
    let (feats, grads) = block_features_and_gradients(encoder, image, layer, scalar)?;
    let (_, h, w) = feats.dim();
    let alpha = activation_weights(feats.view(), grads.view(), h * w)?;
    let map = weighted_map(feats.view(), &alpha);
    ActivationMap::new(upsample_bilinear(&map, image.dims()))
}

pub fn self_activation_map(
    checkpoint: &Checkpoint,
    image: &RasterImage,
    layer: LayerSelector,
    scalar: ScalarOutput,
) -> Result<ActivationMap> {
    let mut encoder = checkpoint.build_encoder()?;
    activation_with_encoder(&mut encoder, image, layer, scalar)
}

/// Blue-to-red ramp: `r = v`, `g = 1 - |2v - 1|`, `b = 1 - v`. Red rises
/// and blue falls strictly with activation.
pub fn colorize_value(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]
}

/// Colorizes the normalized map.
pub fn colorize_heatmap(map: &ActivationMap) -> RasterImage {
    let n = map.normalized_values();
    let (h, w) = n.dim();
    let px = Array3::from_shape_fn((h, w, 3), |(r, c, ch)| colorize_value(n[[r, c]])[ch]);
    RasterImage::new(px).expect("ramp values lie in [0, 1]")
}
