use super::{join, Mode, Module, Param, Slot};
use crate::tensor::{Real, Tensor};

struct Cache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Per-channel batch normalization. Starts as the identity map (unit scale,
/// zero shift, zero mean and unit variance statistics).
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    momentum: T,
    eps: T,
    cache: Option<Cache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); channels], vec![channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let s = x.shape();
        assert_eq!(s.channels, self.gamma.numel(), "batchnorm channels");
        let per = s.per_channel();
        let mut out = Tensor::zeros(s);
        match mode {
            Mode::Eval => {
                for (c, (src, dst)) in x.data().chunks(per).zip(out.data_mut().chunks_mut(per)).enumerate() {
                    let inv = (self.running_var[c] + self.eps).sqrt().recip();
                    let scale = self.gamma.value[c] * inv;
                    let shift = self.beta.value[c] - self.running_mean[c] * scale;
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v * scale + shift;
                    }
                }
            }
            Mode::Train => {
                let count = T::lit(per as f64);
                let mut xhat = vec![T::zero(); s.numel()];
                let mut inv_std = vec![T::zero(); s.channels];
                for (c, ((src, dst), xh)) in x
                    .data()
                    .chunks(per)
                    .zip(out.data_mut().chunks_mut(per))
                    .zip(xhat.chunks_mut(per))
                    .enumerate()
                {
                    let mean = src.iter().copied().sum::<T>() / count;
                    let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
                    let inv = (var + self.eps).sqrt().recip();
                    inv_std[c] = inv;
                    let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                    for ((d, h), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                        *h = (v - mean) * inv;
                        *d = g * *h + b;
                    }
                    let unbiased = if per > 1 {
                        var * count / (count - T::one())
                    } else {
                        var
                    };
                    let m = self.momentum;
                    self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * mean;
                    self.running_var[c] = (T::one() - m) * self.running_var[c] + m * unbiased;
                }
                self.cache = Some(Cache { xhat, inv_std });
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm2d::backward without a training-mode forward");
        let s = dy.shape();
        let per = s.per_channel();
        let count = T::lit(per as f64);
        let mut dx = Tensor::zeros(s);
        for (c, ((g, xh), d)) in dy
            .data()
            .chunks(per)
            .zip(cache.xhat.chunks(per))
            .zip(dx.data_mut().chunks_mut(per))
            .enumerate()
        {
            let sum_dy = g.iter().copied().sum::<T>();
            let sum_dy_xhat = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            let k = self.gamma.value[c] * cache.inv_std[c] / count;
            for ((o, &gv), &h) in d.iter_mut().zip(g).zip(xh) {
                *o = k * (count * gv - sum_dy - h * sum_dy_xhat);
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "bias"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}
