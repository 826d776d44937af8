use ndarray::{concatenate, s, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::param::{join, Param, Parameterized};
use crate::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    output: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.mapv(|v| v.max(0.0));
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let y = self
            .output
            .take()
            .expect("Relu::backward called before forward");
        let mut g = gy.clone();
        g.zip_mut_with(&y, |g, &y| {
            if y <= 0.0 {
                *g = 0.0
            }
        });
        g
    }
}

/// Nearest-neighbour 2x spatial upsampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        Tensor::from_shape_fn((n, c, 2 * h, 2 * w), |(s, ch, i, j)| {
            x[[s, ch, i / 2, j / 2]]
        })
    }

    pub fn backward(&self, gy: &Tensor) -> Tensor {
        let (n, c, h2, w2) = gy.dim();
        let mut g = Tensor::zeros((n, c, h2 / 2, w2 / 2));
        for ((s, ch, i, j), v) in gy.indexed_iter() {
            g[[s, ch, i / 2, j / 2]] += v;
        }
        g
    }
}

/// Spatial mean per channel, `[N, C, H, W] -> [N, C, 1, 1]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        self.hw = Some((h, w));
        let pooled = x
            .view()
            .into_shape_with_order((n, c, h * w))
            .map(|v| v.mean_axis(Axis(2)).unwrap())
            .unwrap_or_else(|_| {
                let x = x.as_standard_layout().into_owned();
                x.into_shape_with_order((n, c, h * w))
                    .unwrap()
                    .mean_axis(Axis(2))
                    .unwrap()
            });
        pooled.into_shape_with_order((n, c, 1, 1)).unwrap()
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (h, w) = self
            .hw
            .expect("GlobalAvgPool::backward called before forward");
        let (n, c, _, _) = gy.dim();
        let scale = 1.0 / (h * w) as f32;
        Tensor::from_shape_fn((n, c, h, w), |(s, ch, _, _)| gy[[s, ch, 0, 0]] * scale)
    }
}

/// Fully connected layer acting on `[N, in, 1, 1]` tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let weight = (0..in_features * out_features)
            .map(|_| dist.sample(rng))
            .collect();
        Self {
            weight: Param::new(vec![out_features, in_features], weight),
            bias: Param::filled(vec![out_features], 0.0),
            input: None,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, fin, _, _) = x.dim();
        let fout = self.out_features();
        assert_eq!(fin, self.weight.shape[1], "linear input size mismatch");
        let mut y = Tensor::zeros((n, fout, 1, 1));
        for s in 0..n {
            for o in 0..fout {
                let row = &self.weight.value[o * fin..][..fin];
                let mut acc = self.bias.value[o];
                for (i, wv) in row.iter().enumerate() {
                    acc += wv * x[[s, i, 0, 0]];
                }
                y[[s, o, 0, 0]] = acc;
            }
        }
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self
            .input
            .take()
            .expect("Linear::backward called before forward");
        let (n, fin, _, _) = x.dim();
        let fout = self.out_features();
        let mut dx = Tensor::zeros((n, fin, 1, 1));
        for s in 0..n {
            for o in 0..fout {
                let g = gy[[s, o, 0, 0]];
                self.bias.grad[o] += g;
                for i in 0..fin {
                    self.weight.grad[o * fin + i] += g * x[[s, i, 0, 0]];
                    dx[[s, i, 0, 0]] += g * self.weight.value[o * fin + i];
                }
            }
        }
        dx
    }
}

impl Parameterized for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("concat shape mismatch")
}

/// Inverse of [`concat_channels`] for gradients: splits after `first` channels.
pub fn split_channels(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    (
        g.slice(s![.., ..first, .., ..]).to_owned(),
        g.slice(s![.., first.., .., ..]).to_owned(),
    )
}
