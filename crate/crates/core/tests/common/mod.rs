//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use diresnet::label_gen::{BinaryMask, DirectionParams};
use diresnet::losses::hybrid_loss_grad;
use diresnet::network::{Model, NetworkConfig};
use diresnet::nn::{kinks, zero_grads, Adam, Module, Slot};
use diresnet::tensor::{Shape, Tensor};
use diresnet::trainer::make_targets;
use diresnet::{LossWeights, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    let data = (0..h * w).map(|_| rng.random_bool(density) as u8).collect();
    BinaryMask::new(h, w, data).unwrap()
}

/// Blobby masks: a few random lines and disks, closer to road layouts than noise.
pub fn road_like_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(h, w);
    for _ in 0..rng.random_range(1..4) {
        let (y0, x0) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let (y1, x1) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let half = rng.random_range(0.5..3.0);
        let len = ((y1 - y0).powi(2) + (x1 - x0).powi(2)).sqrt().max(1e-9);
        for i in 0..h {
            for j in 0..w {
                let (py, px) = (i as f64 - y0, j as f64 - x0);
                let t = ((py * (y1 - y0) + px * (x1 - x0)) / (len * len)).clamp(0.0, 1.0);
                let (dy, dx) = (py - t * (y1 - y0), px - t * (x1 - x0));
                if (dy * dy + dx * dx).sqrt() <= half {
                    m.set(i, j, true);
                }
            }
        }
    }
    m
}

pub struct GradCheck {
    /// `|g_a - g_n| / (|g_a| + |g_n|)` over the accepted weights, as vectors.
    pub rel_error: f64,
    pub accepted: usize,
    /// Weights skipped because the perturbation crossed a kink.
    pub rejected: usize,
}

/// Flat (parameter index, element) list of every trainable scalar.
fn param_sites(model: &mut Model<f64>) -> Vec<(usize, usize)> {
    let mut sites = Vec::new();
    let mut k = 0;
    model.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            sites.extend((0..p.numel()).map(|e| (k, e)));
            k += 1;
        }
    });
    sites
}

fn with_param(model: &mut Model<f64>, site: (usize, usize), f: &mut dyn FnMut(&mut f64, f64)) {
    let mut k = 0;
    model.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            if k == site.0 {
                let g = p.grad[site.1];
                f(&mut p.value[site.1], g);
            }
            k += 1;
        }
    });
}

/// Compares backpropagated gradients of the hybrid loss on one random
/// `3 x size x size` input with central differences of step `step` at
/// `sample` random weights. With `kink_free`, weights whose perturbation
/// changes any branch decision are replaced by fresh draws.
pub fn gradient_check(config: &NetworkConfig, seed: u64, size: usize, step: f64, sample: usize, kink_free: bool) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * size * size).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = Tensor::from_vec(Shape::new(3, 1, size, size), data);
    let mask = road_like_mask(&mut rng, size, size);
    let params = DirectionParams::from_divisions(3, 8).unwrap();
    let targets = make_targets(vec![mask], &params, config.downsample).unwrap();
    let weights = LossWeights::default();
    let mut model = Model::<f64>::new(config, seed).unwrap();

    let loss = |model: &mut Model<f64>, backward: bool| {
        let out = model.forward(&x, Mode::Train).unwrap();
        let (report, grads) = hybrid_loss_grad(&out, &targets, &weights).unwrap();
        if backward {
            zero_grads(model);
            model.backward(&grads);
        }
        report.total
    };

    // Leave the initial point, where the refiner output is exactly zero.
    let mut adam = Adam::<f64>::default();
    for _ in 0..2 {
        loss(&mut model, true);
        adam.step(&mut model, 1e-2);
    }
    let (_, base) = kinks::record(|| loss(&mut model, true));

    let sites = param_sites(&mut model);
    let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
    let (mut accepted, mut rejected) = (0, 0);
    while accepted < sample && rejected < 50 * sample {
        let site = sites[rng.random_range(0..sites.len())];
        let mut analytic = 0.0;
        with_param(&mut model, site, &mut |v, g| {
            analytic = g;
            *v += step;
        });
        let (plus, p_plus) = kinks::record(|| loss(&mut model, false));
        with_param(&mut model, site, &mut |v, _| *v -= 2.0 * step);
        let (minus, p_minus) = kinks::record(|| loss(&mut model, false));
        with_param(&mut model, site, &mut |v, _| *v += step);
        if kink_free && (p_plus != base || p_minus != base) {
            rejected += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        diff += (analytic - numeric).powi(2);
        norm_a += analytic * analytic;
        norm_n += numeric * numeric;
        accepted += 1;
    }
    GradCheck {
        rel_error: diff.sqrt() / (norm_a.sqrt() + norm_n.sqrt()).max(1e-300),
        accepted,
        rejected,
    }
}
