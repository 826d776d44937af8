use crate::param::Parameterized;

/// Adam with bias correction. Gradients are consumed (zeroed) by `step`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, model: &mut dyn Parameterized) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        model.visit("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
                p.grad[i] = 0.0;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{join, Param};

    struct Quad(Param);

    impl Parameterized for Quad {
        fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
            f(join(prefix, "x"), &mut self.0);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut q = Quad(Param::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g: Vec<f32> = q.0.value.iter().map(|v| 2.0 * v).collect();
            q.0.grad = g;
            opt.step(&mut q);
        }
        assert!(q.0.value.iter().all(|v| v.abs() < 1e-2));
        assert!(q.0.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn buffers_are_untouched() {
        let mut q = Quad(Param::buffer(vec![1], vec![1.0]));
        q.0.grad = vec![5.0];
        Adam::new(0.1).step(&mut q);
        assert_eq!(q.0.value, vec![1.0]);
    }
}
