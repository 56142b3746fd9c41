use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::io::{write_mask, write_rgb, RgbImage};
use crate::label_gen::BinaryMask;
use crate::{Error, Result};

/// File name of the manifest written next to a synthetic dataset.
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_images: usize,
    /// Inclusive road width range in pixels.
    pub road_width_range: (usize, usize),
    /// Inclusive range of road strokes per image.
    pub roads_per_image: (usize, usize),
    /// Target fraction of road pixels hidden under tree canopies or shadows.
    pub occlusion_density: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            n_images: 200,
            road_width_range: (3, 9),
            roads_per_image: (1, 3),
            occlusion_density: 0.15,
            noise_level: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (w0, w1) = self.road_width_range;
        let (r0, r1) = self.roads_per_image;
        if self.image_size < 64 {
            return Err(Error::Param(format!("image_size must be at least 64, got {}", self.image_size)));
        }
        if w0 < 1 || w0 > w1 {
            return Err(Error::Param(format!("invalid road width range {w0}..={w1}")));
        }
        if w1 > self.image_size {
            return Err(Error::Param(format!(
                "road width {w1} exceeds image size {}",
                self.image_size
            )));
        }
        if r0 > r1 || r1 == 0 {
            return Err(Error::Param(format!("invalid roads per image range {r0}..={r1}")));
        }
        if !(0.0..=1.0).contains(&self.occlusion_density) {
            return Err(Error::Param(format!("occlusion_density {} outside [0, 1]", self.occlusion_density)));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(Error::Param(format!("noise_level {} must be >= 0", self.noise_level)));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn color(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f32; 3] {
    [0, 1, 2].map(|c| uniform(rng, lo[c], hi[c]) as f32)
}

/// A random point on the image border.
fn border_point(rng: &mut ChaCha8Rng, side: usize, size: f64) -> (f64, f64) {
    let t = uniform(rng, 0.1, 0.9) * size;
    match side {
        0 => (0.0, t),
        1 => (t, size - 1.0),
        2 => (size - 1.0, t),
        _ => (t, 0.0),
    }
}

fn stamp_disc(size: usize, cy: f64, cx: f64, radius: f64, mut f: impl FnMut(usize, usize)) {
    let r = radius.max(0.5);
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(size - 1);
    let x1 = ((cx + r).ceil() as usize).min(size - 1);
    if cy + r < 0.0 || cx + r < 0.0 {
        return;
    }
    for i in y0..=y1 {
        for j in x0..=x1 {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            if dy * dy + dx * dx <= r * r {
                f(i, j);
            }
        }
    }
}

/// Generates sample `index` of the dataset described by `config`. Each
/// sample uses its own random stream, so samples can be drawn in any order.
pub fn synth_sample(config: &SynthConfig, index: usize) -> Result<Sample> {
    config.validate()?;
    let n = config.image_size;
    let size = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6a09_e667_f3bc_c908);
    rng.set_stream(index as u64);

    // Vegetation and soil background with smooth large-scale variation.
    let base = color(&mut rng, [0.20, 0.30, 0.14], [0.36, 0.46, 0.26]);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let a = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let freq = uniform(&mut rng, 1.0, 4.0) * std::f64::consts::TAU / size;
            (a.cos() * freq, a.sin() * freq, uniform(&mut rng, 0.0, std::f64::consts::TAU), 0.03)
        })
        .collect();
    let mut img = RgbImage::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, amp)| amp * (fy * i as f64 + fx * j as f64 + ph).sin())
                .sum();
            for c in 0..3 {
                img.set(c, i, j, base[c] + v as f32);
            }
        }
    }

    // Compact buildings as non-linear distractors, some with road-like roofs.
    for _ in 0..rng.random_range(0..=3usize) {
        let (h, w) = (rng.random_range(6..=14usize), rng.random_range(6..=14usize));
        let (top, left) = (rng.random_range(0..n - h), rng.random_range(0..n - w));
        let roof = if rng.random_bool(0.5) {
            let g = uniform(&mut rng, 0.5, 0.72) as f32;
            [g, g, g]
        } else {
            color(&mut rng, [0.55, 0.25, 0.2], [0.75, 0.4, 0.3])
        };
        for i in top..top + h {
            for j in left..left + w {
                for (c, &v) in roof.iter().enumerate() {
                    img.set(c, i, j, v);
                }
            }
        }
    }

    // Roads: quadratic curves between two border points, bounded bend.
    let mut mask = BinaryMask::zeros(n, n);
    let (w0, w1) = config.road_width_range;
    let roads = rng.random_range(config.roads_per_image.0..=config.roads_per_image.1);
    let mut widest = 0.0f64;
    for _ in 0..roads {
        let s0 = rng.random_range(0..4usize);
        let s1 = (s0 + rng.random_range(1..4usize)) % 4;
        let p0 = border_point(&mut rng, s0, size);
        let p2 = border_point(&mut rng, s1, size);
        let (dy, dx) = (p2.0 - p0.0, p2.1 - p0.1);
        let len = (dy * dy + dx * dx).sqrt().max(1.0);
        let bend = uniform(&mut rng, -0.25, 0.25) * len;
        let p1 = (0.5 * (p0.0 + p2.0) - dx / len * bend, 0.5 * (p0.1 + p2.1) + dy / len * bend);
        let width = rng.random_range(w0..=w1) as f64;
        widest = widest.max(width);
        let gray = uniform(&mut rng, 0.58, 0.75) as f32;
        let tint = color(&mut rng, [-0.02, -0.02, -0.02], [0.02, 0.02, 0.02]);
        let steps = (2.0 * len * 1.5).ceil() as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let u = 1.0 - t;
            let y = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let x = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            stamp_disc(n, y, x, width / 2.0, |i, j| {
                mask.set(i, j, true);
                for c in 0..3 {
                    img.set(c, i, j, gray + tint[c]);
                }
            });
        }
    }

    // Occluders paint over the image but leave the mask untouched.
    let road_pixels: Vec<(usize, usize)> = (0..n * n)
        .map(|k| (k / n, k % n))
        .filter(|&(i, j)| mask.get(i, j) == 1)
        .collect();
    let target = (config.occlusion_density * road_pixels.len() as f64).round() as usize;
    let mut hidden = vec![false; n * n];
    let mut hidden_count = 0;
    let mut attempts = 0;
    while hidden_count < target && attempts < 10_000 {
        attempts += 1;
        let (ci, cj) = road_pixels[rng.random_range(0..road_pixels.len())];
        let radius = uniform(&mut rng, 0.5 * widest, widest + 2.0);
        let tree = rng.random_bool(0.6);
        let canopy = color(&mut rng, [0.08, 0.18, 0.06], [0.16, 0.30, 0.12]);
        stamp_disc(n, ci as f64, cj as f64, radius, |i, j| {
            for c in 0..3 {
                let v = if tree { canopy[c] } else { img.get(c, i, j) * 0.45 };
                img.set(c, i, j, v);
            }
            let k = i * n + j;
            if !hidden[k] && mask.get(i, j) == 1 {
                hidden[k] = true;
                hidden_count += 1;
            }
        });
    }

    if config.noise_level > 0.0 {
        let normal = Normal::new(0.0, config.noise_level).expect("valid noise level");
        for v in img.data.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    // Quantized to 8 bits so that a written dataset reads back identically.
    for v in img.data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Sample::new(format!("{index:05}"), img, mask)
}

/// The full dataset; a pure function of the config.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..config.n_images).map(|i| synth_sample(config, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: SynthConfig,
    pub images: Vec<String>,
    pub masks: Vec<String>,
}

/// Writes `image_%05d.png` / `mask_%05d.png` pairs and a JSON manifest.
pub fn write_dataset(samples: &[Sample], dir: &Path, config: &SynthConfig) -> Result<SynthManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = SynthManifest {
        generator: config.clone(),
        images: Vec::new(),
        masks: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let image = format!("image_{i:05}.png");
        let mask = format!("mask_{i:05}.png");
        write_rgb(&dir.join(&image), &s.image)?;
        write_mask(&dir.join(&mask), &s.mask)?;
        manifest.images.push(image);
        manifest.masks.push(mask);
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<SynthManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            image_size: 64,
            n_images: 6,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(synth_generate(&small()).unwrap(), synth_generate(&small()).unwrap());
        let other = SynthConfig { seed: 4, ..small() };
        assert_ne!(synth_generate(&small()).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn samples_are_order_independent() {
        let all = synth_generate(&small()).unwrap();
        assert_eq!(synth_sample(&small(), 4).unwrap(), all[4]);
    }

    #[test]
    fn clean_roads_stand_out_from_the_background() {
        let cfg = SynthConfig { occlusion_density: 0.0, noise_level: 0.0, ..small() };
        for s in synth_generate(&cfg).unwrap() {
            // The background mean is estimated from the corners of the colour field.
            let bg: Vec<f32> = (0..3)
                .map(|c| {
                    let vals: Vec<f32> = (0..64 * 64)
                        .filter(|&k| s.mask.data()[k] == 0)
                        .map(|k| s.image.plane(c)[k])
                        .collect();
                    let mut v = vals.clone();
                    v.sort_by(f32::total_cmp);
                    v[v.len() / 2]
                })
                .collect();
            for k in (0..64 * 64).filter(|&k| s.mask.data()[k] == 1) {
                let diff = (0..3).map(|c| (s.image.plane(c)[k] - bg[c]).abs()).fold(0.0, f32::max);
                assert!(diff > 0.1, "sample {} pixel {k}: {diff}", s.id);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig { image_size: 32, ..small() }.validate().is_err());
        assert!(SynthConfig { road_width_range: (0, 3), ..small() }.validate().is_err());
        assert!(SynthConfig { road_width_range: (3, 65), ..small() }.validate().is_err());
        assert!(SynthConfig { occlusion_density: 1.5, ..small() }.validate().is_err());
    }

    #[test]
    fn write_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(&small()).unwrap();
        write_dataset(&samples, dir.path(), &small()).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.images.len(), 6);
        assert_eq!(m.generator, small());
        assert!(dir.path().join("image_00005.png").exists() && dir.path().join("mask_00000.png").exists());
    }
}
