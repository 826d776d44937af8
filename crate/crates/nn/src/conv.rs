use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::param::{join, Param, Parameterized};
use crate::Tensor;

/// 2-D convolution over `NCHW` input, lowered to a single GEMM per batch via
/// im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in * k * k]`
    pub weight: Param,
    pub bias: Option<Param>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f32>,
    input_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// Kaiming-normal initialized convolution.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        let weight: Vec<f32> = (0..out_ch * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Param::new(vec![out_ch, fan_in], weight),
            bias: bias.then(|| Param::filled(vec![out_ch], 0.0)),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let (ho, wo) = self.out_size(h, w);
        let x = x.as_standard_layout();
        let cols = im2col(
            x.as_slice().unwrap(),
            (n, c, h, w),
            self.kernel,
            self.stride,
            self.padding,
            (ho, wo),
        );
        let weight = ArrayView2::from_shape(
            (self.out_ch, c * self.kernel * self.kernel),
            &self.weight.value,
        )
        .unwrap();
        let mut out = Array2::<f32>::zeros((self.out_ch, n * ho * wo));
        general_mat_mul(1.0, &weight, &cols, 0.0, &mut out);

        let plane = ho * wo;
        let mut y = Tensor::zeros((n, self.out_ch, ho, wo));
        {
            let ys = y.as_slice_mut().unwrap();
            let os = out.as_slice().unwrap();
            for o in 0..self.out_ch {
                let b = self.bias.as_ref().map_or(0.0, |b| b.value[o]);
                for s in 0..n {
                    let src = &os[o * n * plane + s * plane..][..plane];
                    let dst = &mut ys[(s * self.out_ch + o) * plane..][..plane];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = v + b;
                    }
                }
            }
        }
        self.cache = Some(ConvCache {
            cols,
            input_dim: (n, c, h, w),
            out_hw: (ho, wo),
        });
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let cache = self
            .cache
            .take()
            .expect("Conv2d::backward called before forward");
        let (n, c, h, w) = cache.input_dim;
        let (ho, wo) = cache.out_hw;
        assert_eq!(
            gy.dim(),
            (n, self.out_ch, ho, wo),
            "conv grad shape mismatch"
        );
        let plane = ho * wo;
        let gy = gy.as_standard_layout();
        let gs = gy.as_slice().unwrap();

        // [out, N * plane]
        let mut gmat = Array2::<f32>::zeros((self.out_ch, n * plane));
        {
            let gm = gmat.as_slice_mut().unwrap();
            for o in 0..self.out_ch {
                for s in 0..n {
                    gm[o * n * plane + s * plane..][..plane]
                        .copy_from_slice(&gs[(s * self.out_ch + o) * plane..][..plane]);
                }
            }
        }
        if let Some(bias) = self.bias.as_mut() {
            for (o, row) in gmat.rows().into_iter().enumerate() {
                bias.grad[o] += row.sum();
            }
        }
        let ckk = c * self.kernel * self.kernel;
        {
            let mut gw =
                ArrayViewMut2::from_shape((self.out_ch, ckk), &mut self.weight.grad).unwrap();
            general_mat_mul(1.0, &gmat, &cache.cols.t(), 1.0, &mut gw);
        }
        let weight = ArrayView2::from_shape((self.out_ch, ckk), &self.weight.value).unwrap();
        let mut dcols = Array2::<f32>::zeros((ckk, n * plane));
        general_mat_mul(1.0, &weight.t(), &gmat, 0.0, &mut dcols);

        let mut dx = Tensor::zeros((n, c, h, w));
        col2im(
            dcols.as_slice().unwrap(),
            dx.as_slice_mut().unwrap(),
            (n, c, h, w),
            self.kernel,
            self.stride,
            self.padding,
            (ho, wo),
        );
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Input index ranges `[lo, hi)` of output positions whose tap lands inside
/// the input for offset `tap`.
#[inline]
fn valid_range(out: usize, stride: usize, tap: usize, pad: usize, size: usize) -> (usize, usize) {
    // position = o * stride + tap - pad must lie in [0, size)
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi = if size + pad > tap {
        ((size + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(
    xs: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Array2<f32> {
    let plane = ho * wo;
    let mut cols = Array2::<f32>::zeros((c * k * k, n * plane));
    let cs = cols.as_slice_mut().unwrap();
    let ncols = n * plane;
    for ci in 0..c {
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(ho, stride, ki, pad, h);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(wo, stride, kj, pad, w);
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cs[row * ncols..][..ncols];
                for s in 0..n {
                    let src = &xs[(s * c + ci) * h * w..][..h * w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + ki - pad;
                        let srow = &src[ih * w..][..w];
                        let drow = &mut dst[s * plane + oh * wo..][..wo];
                        if stride == 1 {
                            let off = ow_lo + kj - pad;
                            drow[ow_lo..ow_hi].copy_from_slice(&srow[off..off + (ow_hi - ow_lo)]);
                        } else {
                            for ow in ow_lo..ow_hi {
                                drow[ow] = srow[ow * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cs: &[f32],
    dx: &mut [f32],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) {
    let plane = ho * wo;
    let ncols = n * plane;
    for ci in 0..c {
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(ho, stride, ki, pad, h);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(wo, stride, kj, pad, w);
                let row = (ci * k + ki) * k + kj;
                let src = &cs[row * ncols..][..ncols];
                for s in 0..n {
                    let dst = &mut dx[(s * c + ci) * h * w..][..h * w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + ki - pad;
                        let srow = &src[s * plane + oh * wo..][..wo];
                        let drow = &mut dst[ih * w..][..w];
                        if stride == 1 {
                            let off = ow_lo + kj - pad;
                            for (d, v) in drow[off..off + (ow_hi - ow_lo)]
                                .iter_mut()
                                .zip(&srow[ow_lo..ow_hi])
                            {
                                *d += v;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                drow[ow * stride + kj - pad] += srow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}
