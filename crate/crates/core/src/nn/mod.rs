//! Minimal layer library with explicit backward passes.
//!
//! Every layer caches what it needs during a training-mode forward call and
//! consumes that cache in `backward`, accumulating parameter gradients into
//! [`Param::grad`]. Composite modules chain these calls by hand, so there is
//! no tape and no dynamic graph.

mod blocks;
mod conv;
pub mod kinks;
mod norm;
mod ops;
mod optim;

pub use blocks::{BasicBlock, ConvBnAct, DeconvBnAct};
pub use conv::{Conv2d, ConvTranspose2d};
pub use norm::BatchNorm2d;
pub use ops::{
    bilinear_upsample, bilinear_upsample_backward, nearest_upsample, MaxPool2d, nearest_upsample_backward,
    relu_backward, relu_inplace,
};
pub use optim::{cosine_lr, Adam};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Real;

/// Forward-pass mode. Only `Train` records the caches used by `backward`
/// and updates normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub dims: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>, dims: Vec<usize>) -> Self {
        assert_eq!(value.len(), dims.iter().product::<usize>(), "param dims");
        let grad = vec![T::zero(); value.len()];
        Self { value, grad, dims }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self::new(vec![T::zero(); n], dims)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// A named storage location inside a module tree.
pub enum Slot<'a, T> {
    /// Trainable weights.
    Param(&'a mut Param<T>),
    /// Non-trainable state that still belongs in a checkpoint.
    Buffer(&'a mut Vec<T>),
}

pub trait Module<T: Real> {
    /// Visits every parameter and buffer in a fixed order with its dotted path.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads<T: Real>(module: &mut dyn Module<T>) {
    module.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    });
}

/// Number of trainable scalars.
pub fn count_params<T: Real>(module: &mut dyn Module<T>) -> usize {
    let mut total = 0;
    module.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            total += p.numel();
        }
    });
    total
}

/// Fan-in scaled normal initialization from a seeded stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn kaiming<T: Real>(&mut self, fan_in: usize, len: usize) -> Vec<T> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        (0..len).map(|_| T::lit(normal.sample(&mut self.rng))).collect()
    }
}
