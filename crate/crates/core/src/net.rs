//! Network topologies: the block-structured encoder used for pretraining and
//! saliency, and the residual U-Net used for detection and segmentation.

use psam_nn::{
    concat_channels, join, split_channels, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Param,
    Parameterized, Relu, Tensor, Upsample2x,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `conv-bn-relu-conv-bn` plus shortcut, followed by ReLU. The shortcut is a
/// strided 1x1 projection whenever shape changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl ResBlock {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let shortcut = (in_channels != out_channels || stride != 1).then(|| {
            (
                Conv2d::new(in_channels, out_channels, 1, stride, 0, false, rng),
                BatchNorm2d::new(out_channels),
            )
        });
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_channels),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_channels),
            shortcut,
            relu_out: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let h = self.conv1.forward(x);
        let h = self.bn1.forward(&h, train);
        let h = self.relu1.forward(&h);
        let h = self.conv2.forward(&h);
        let mut h = self.bn2.forward(&h, train);
        match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let s = conv.forward(x);
                h += &bn.forward(&s, train);
            }
            None => h += x,
        }
        self.relu_out.forward(&h)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let g = self.relu_out.backward(gy);
        let gh = self.bn2.backward(&g);
        let gh = self.conv2.backward(&gh);
        let gh = self.relu1.backward(&gh);
        let gh = self.bn1.backward(&gh);
        let mut gx = self.conv1.backward(&gh);
        match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let gs = bn.backward(&g);
                gx += &conv.backward(&gs);
            }
            None => gx += &g,
        }
        gx
    }
}

impl Parameterized for ResBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.visit(&join(prefix, "shortcut.conv"), f);
            bn.visit(&join(prefix, "shortcut.bn"), f);
        }
    }
}

/// `3x3 conv - BN - ReLU`.
#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
}

impl Stem {
    fn new<R: Rng>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_channels, out_channels, 3, stride, 1, false, rng),
            bn: BatchNorm2d::new(out_channels),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let h = self.conv.forward(x);
        let h = self.bn.forward(&h, train);
        self.relu.forward(&h)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let g = self.relu.backward(gy);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }
}

impl Parameterized for Stem {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

fn run_blocks(blocks: &mut [ResBlock], x: &Tensor, train: bool) -> Tensor {
    blocks
        .iter_mut()
        .fold(x.clone(), |h, b| b.forward(&h, train))
}

fn back_blocks(blocks: &mut [ResBlock], g: &Tensor) -> Tensor {
    blocks
        .iter_mut()
        .rev()
        .fold(g.clone(), |g, b| b.backward(&g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderPreset {
    /// Four single-block stages, widths 16/32/64/128.
    Compact,
    /// Four stages of depths 3/4/6/3, widths 32/64/128/256.
    Deep,
}

/// One encoder stage: `depth` residual blocks producing `width` channels; the
/// first block downsamples by `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub width: usize,
    pub depth: usize,
    pub stride: usize,
}

/// Per-channel input standardization, `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputNorm {
    /// Channel statistics over every pixel of `images` (`[N, C, H, W]`).
    /// Standard deviations are floored at `1e-3`.
    pub fn fit(images: &Tensor) -> Self {
        let c = images.dim().1;
        let (mut mean, mut std) = (Vec::with_capacity(c), Vec::with_capacity(c));
        for ch in 0..c {
            let plane = images.index_axis(ndarray::Axis(1), ch);
            let n = plane.len().max(1) as f64;
            let m = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            mean.push(m as f32);
            std.push((var.sqrt() as f32).max(1e-3));
        }
        Self { mean, std }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for (ch, mut plane) in out.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    fn backward(&self, g: &Tensor) -> Tensor {
        let mut out = g.clone();
        for (ch, mut plane) in out.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let s = self.std[ch];
            plane.mapv_inplace(|v| v / s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub preset: EncoderPreset,
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub embedding_dim: usize,
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    /// Applied before the stem; set by pretraining from the training images.
    #[serde(default)]
    pub input_norm: Option<InputNorm>,
}

fn default_stem_stride() -> usize {
    2
}

impl EncoderSpec {
    pub fn from_preset(preset: EncoderPreset) -> Self {
        let (widths, depths, embedding_dim) = match preset {
            EncoderPreset::Compact => ([16, 32, 64, 128], [1, 1, 1, 1], 64),
            EncoderPreset::Deep => ([32, 64, 128, 256], [3, 4, 6, 3], 128),
        };
        let blocks = widths
            .iter()
            .zip(depths)
            .enumerate()
            .map(|(i, (&width, depth))| BlockSpec {
                width,
                depth,
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect();
        Self {
            preset,
            in_channels: 3,
            blocks,
            embedding_dim,
            stem_stride: default_stem_stride(),
            input_norm: None,
        }
    }

    pub fn compact() -> Self {
        Self::from_preset(EncoderPreset::Compact)
    }

    pub fn deep() -> Self {
        Self::from_preset(EncoderPreset::Deep)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "encoder needs at least 2 blocks, got {}",
                self.blocks.len()
            )));
        }
        if self.in_channels == 0
            || self.embedding_dim == 0
            || self.stem_stride == 0
            || self
                .blocks
                .iter()
                .any(|b| b.width == 0 || b.depth == 0 || b.stride == 0)
        {
            return Err(Error::InvalidInput(
                "encoder widths, depths and strides must be positive".into(),
            ));
        }
        if let Some(n) = &self.input_norm {
            if n.mean.len() != self.in_channels
                || n.std.len() != self.in_channels
                || n.mean.iter().chain(&n.std).any(|v| !v.is_finite())
                || n.std.iter().any(|&s| s <= 0.0)
            {
                return Err(Error::InvalidInput(
                    "input normalization needs one finite mean and positive std per channel".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Post-activation output of every block, index 0 = block 1.
    pub features: Vec<Tensor>,
    /// `[N, embedding_dim, 1, 1]`
    pub embedding: Tensor,
}

/// Stem, `blocks.len()` residual stages, global average pooling and a linear
/// projection to the embedding.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    stem: Stem,
    blocks: Vec<Vec<ResBlock>>,
    pool: GlobalAvgPool,
    head: Linear,
}

impl Encoder {
    pub fn new<R: Rng>(spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let stem = Stem::new(
            spec.in_channels,
            spec.blocks[0].width,
            spec.stem_stride,
            rng,
        );
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut channels = spec.blocks[0].width;
        for b in &spec.blocks {
            let stage = (0..b.depth)
                .map(|d| {
                    let (cin, stride) = if d == 0 {
                        (channels, b.stride)
                    } else {
                        (b.width, 1)
                    };
                    ResBlock::new(cin, b.width, stride, rng)
                })
                .collect();
            blocks.push(stage);
            channels = b.width;
        }
        Ok(Self {
            spec: spec.clone(),
            stem,
            blocks,
            pool: GlobalAvgPool::new(),
            head: Linear::new(channels, spec.embedding_dim, rng),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> EncoderOutput {
        let mut h = match &self.spec.input_norm {
            Some(n) => self.stem.forward(&n.apply(x), train),
            None => self.stem.forward(x, train),
        };
        let mut features = Vec::with_capacity(self.blocks.len());
        for stage in &mut self.blocks {
            h = run_blocks(stage, &h, train);
            features.push(h.clone());
        }
        let pooled = self.pool.forward(&h);
        EncoderOutput {
            features,
            embedding: self.head.forward(&pooled),
        }
    }

    /// Backpropagates an embedding gradient. Returns the gradient with
    /// respect to the output of block `stop` (1-based), or with respect to
    /// the network input when `stop == 0`. Parameter gradients are
    /// accumulated for every layer traversed.
    pub fn backward(&mut self, g_embedding: &Tensor, stop: usize) -> Tensor {
        assert!(stop <= self.blocks.len(), "block {stop} out of range");
        let g = self.head.backward(g_embedding);
        let mut g = self.pool.backward(&g);
        for stage in self.blocks[stop..].iter_mut().rev() {
            g = back_blocks(stage, &g);
        }
        if stop == 0 {
            g = self.stem.backward(&g);
            if let Some(n) = &self.spec.input_norm {
                g = n.backward(&g);
            }
        }
        g
    }
}

impl Parameterized for Encoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, stage) in self.blocks.iter_mut().enumerate() {
            for (d, b) in stage.iter_mut().enumerate() {
                b.visit(&join(prefix, &format!("block{}.{d}", i + 1)), f);
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackbonePreset {
    /// Three stages, widths 8/16/32, one block each.
    Compact,
    /// Four stages of depths 3/4/6/3, widths 16/32/64/128.
    #[serde(rename = "resunet34-analog")]
    Resunet34Analog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetSpec {
    pub preset: BackbonePreset,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
}

impl UnetSpec {
    pub fn from_preset(preset: BackbonePreset) -> Self {
        let (widths, depths) = match preset {
            BackbonePreset::Compact => (vec![8, 16, 32], vec![1, 1, 1]),
            BackbonePreset::Resunet34Analog => (vec![16, 32, 64, 128], vec![3, 4, 6, 3]),
        };
        Self {
            preset,
            in_channels: 3,
            widths,
            depths,
        }
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.len() != self.depths.len() {
            return Err(Error::InvalidInput(
                "U-Net needs at least 2 stages and one depth per width".into(),
            ));
        }
        if self.in_channels == 0 || self.widths.iter().chain(&self.depths).any(|&v| v == 0) {
            return Err(Error::InvalidInput(
                "U-Net widths and depths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Residual encoder-decoder with skip connections and a single-logit head.
/// The sigmoid of the logit equals the foreground softmax probability of an
/// equivalent two-class head.
#[derive(Debug, Clone)]
pub struct ResUnet {
    spec: UnetSpec,
    stem: Stem,
    down: Vec<Vec<ResBlock>>,
    /// `up[i]` produces decoder level `i`, for `i = 0..levels-1`.
    up: Vec<ResBlock>,
    head: Conv2d,
}

impl ResUnet {
    pub fn new<R: Rng>(spec: &UnetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let w = &spec.widths;
        let stem = Stem::new(spec.in_channels, w[0], 1, rng);
        let down = (0..w.len())
            .map(|i| {
                (0..spec.depths[i])
                    .map(|d| match (i, d) {
                        (0, _) => ResBlock::new(w[0], w[0], 1, rng),
                        (_, 0) => ResBlock::new(w[i - 1], w[i], 2, rng),
                        _ => ResBlock::new(w[i], w[i], 1, rng),
                    })
                    .collect()
            })
            .collect();
        let up = (0..w.len() - 1)
            .map(|i| ResBlock::new(w[i + 1] + w[i], w[i], 1, rng))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            stem,
            down,
            up,
            head: Conv2d::new(w[0], 1, 1, 1, 0, true, rng),
        })
    }

    pub fn spec(&self) -> &UnetSpec {
        &self.spec
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::InvalidInput(format!(
                "input {h}x{w} is not a multiple of {m} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Foreground logits `[N, 1, H, W]`.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = self.stem.forward(x, train);
        let mut skips = Vec::with_capacity(self.down.len());
        for stage in &mut self.down {
            h = run_blocks(stage, &h, train);
            skips.push(h.clone());
        }
        for i in (0..self.up.len()).rev() {
            let up = Upsample2x.forward(&h);
            h = self.up[i].forward(&concat_channels(&up, &skips[i]), train);
        }
        self.head.forward(&h)
    }

    pub fn backward(&mut self, g_logits: &Tensor) -> Tensor {
        let levels = self.down.len();
        let mut g_skip: Vec<Option<Tensor>> = vec![None; levels];
        let mut g = self.head.backward(g_logits);
        for i in 0..self.up.len() {
            let g_cat = self.up[i].backward(&g);
            let (g_up, g_s) = split_channels(&g_cat, self.spec.widths[i + 1]);
            g_skip[i] = Some(g_s);
            g = Upsample2x.backward(&g_up);
        }
        for i in (0..levels).rev() {
            if let Some(gs) = g_skip[i].take() {
                g += &gs;
            }
            g = back_blocks(&mut self.down[i], &g);
        }
        self.stem.backward(&g)
    }
}

impl Parameterized for ResUnet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, stage) in self.down.iter_mut().enumerate() {
            for (d, b) in stage.iter_mut().enumerate() {
                b.visit(&join(prefix, &format!("down{i}.{d}")), f);
            }
        }
        for (i, b) in self.up.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("up{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}
