use crate::param::{join, Param, Parameterized};
use crate::Tensor;

/// Per-channel batch normalization. Uses batch statistics in training mode
/// and running statistics otherwise.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f32,
    eps: f32,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dim();
        let plane = h * w;
        let count = (n * plane) as f64;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut xhat = Tensor::zeros((n, c, h, w));
        let mut y = Tensor::zeros((n, c, h, w));
        let mut inv_std = vec![0.0f32; c];
        {
            let xh = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for ch in 0..c {
                let (mean, var) = if train {
                    let mut sum = 0.0f64;
                    for s in 0..n {
                        sum += xs[(s * c + ch) * plane..][..plane]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        sq += xs[(s * c + ch) * plane..][..plane]
                            .iter()
                            .map(|&v| (v as f64 - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / count;
                    let unbiased = if count > 1.0 {
                        var * count / (count - 1.0)
                    } else {
                        var
                    };
                    let m = self.momentum;
                    self.running_mean.value[ch] =
                        (1.0 - m) * self.running_mean.value[ch] + m * mean as f32;
                    self.running_var.value[ch] =
                        (1.0 - m) * self.running_var.value[ch] + m * unbiased as f32;
                    (mean as f32, var as f32)
                } else {
                    (self.running_mean.value[ch], self.running_var.value[ch])
                };
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std[ch] = is;
                let g = self.gamma.value[ch];
                let b = self.beta.value[ch];
                for s in 0..n {
                    let off = (s * c + ch) * plane;
                    for i in off..off + plane {
                        let v = (xs[i] - mean) * is;
                        xh[i] = v;
                        ys[i] = g * v + b;
                    }
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train,
        });
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm2d::backward called before forward");
        let (n, c, h, w) = cache.xhat.dim();
        let plane = h * w;
        let m = (n * plane) as f32;
        let gy = gy.as_standard_layout();
        let gs = gy.as_slice().unwrap();
        let xh = cache.xhat.as_slice().unwrap();
        let mut dx = Tensor::zeros((n, c, h, w));
        let ds = dx.as_slice_mut().unwrap();
        for ch in 0..c {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for s in 0..n {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    sum_g += gs[i] as f64;
                    sum_gx += (gs[i] * xh[i]) as f64;
                }
            }
            self.beta.grad[ch] += sum_g as f32;
            self.gamma.grad[ch] += sum_gx as f32;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for s in 0..n {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    ds[i] = if cache.train {
                        scale / m * (m * gs[i] - sum_g as f32 - xh[i] * sum_gx as f32)
                    } else {
                        scale * gs[i]
                    };
                }
            }
        }
        dx
    }
}

impl Parameterized for BatchNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}
