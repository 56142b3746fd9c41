use std::f64::consts::PI;

use super::{Module, Slot};
use crate::tensor::Real;

/// Cosine decay from `base` at step 0 to zero at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = (step as f64 / (total - 1) as f64).min(1.0);
    0.5 * base * (1.0 + (PI * t).cos())
}

/// Adaptive-moment optimizer. Moment buffers are matched to parameters by
/// visitation order, which is fixed for a given module tree.
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn step(&mut self, module: &mut dyn Module<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        let moments = &mut self.moments;
        let mut index = 0;
        module.visit("", &mut |_, slot| {
            let Slot::Param(p) = slot else { return };
            if moments.len() <= index {
                moments.push((vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]));
            }
            let (m, v) = &mut moments[index];
            assert_eq!(m.len(), p.numel(), "optimizer state out of sync with module");
            for i in 0..p.numel() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p.value[i] -= step_size * m[i] / denom;
            }
            index += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, Slot};

    struct Quadratic(Param<f64>);

    impl Module<f64> for Quadratic {
        fn visit(&mut self, _: &str, f: &mut dyn FnMut(&str, Slot<'_, f64>)) {
            f("x", Slot::Param(&mut self.0));
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quadratic(Param::new(vec![3.0, -2.0], vec![2]));
        let mut adam = Adam::default();
        for _ in 0..2000 {
            q.0.grad = q.0.value.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut q, 0.05);
        }
        assert!(q.0.value.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut q = Quadratic(Param::new(vec![3.0, -2.0], vec![2]));
        let mut adam = Adam::default();
        for _ in 0..10 {
            q.0.grad = vec![1.0, -1.0];
            adam.step(&mut q, 0.0);
        }
        assert_eq!(q.0.value, vec![3.0, -2.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 99, 100).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 50, 101) - 5e-4).abs() < 1e-12);
    }
}
