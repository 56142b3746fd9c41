use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_size: usize,
    /// Crops drawn from every training image per epoch.
    pub crops_per_image: usize,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: 320,
            crops_per_image: 10,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crops_per_image == 0 {
            return Err(Error::Param("crop_size and crops_per_image must be positive".into()));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Param(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Independent random stream for one sample in one epoch, so the draws do
/// not depend on iteration order.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

/// Uniform random crop followed by independent horizontal and vertical flips,
/// applied identically to image and mask.
pub fn random_crop_flip(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let c = config.crop_size;
    if c == 0 || c > sample.height() || c > sample.width() {
        return Err(Error::Shape(format!(
            "crop size {c} does not fit sample {} of {}x{}",
            sample.id,
            sample.height(),
            sample.width()
        )));
    }
    let top = rng.random_range(0..=sample.height() - c);
    let left = rng.random_range(0..=sample.width() - c);
    let hflip = rng.random_bool(config.hflip_prob);
    let vflip = rng.random_bool(config.vflip_prob);
    let mut image = sample.image.crop(top, left, c, c);
    let mut mask = sample.mask.crop(top, left, c, c);
    if hflip {
        image = image.flip_horizontal();
        mask = mask.flip_horizontal();
    }
    if vflip {
        image = image.flip_vertical();
        mask = mask.flip_vertical();
    }
    let id = format!(
        "{}@{top},{left}{}{}",
        sample.id,
        if hflip { "h" } else { "" },
        if vflip { "v" } else { "" }
    );
    Sample::new(id, image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::RgbImage;
    use crate::label_gen::BinaryMask;

    /// Channel 0 encodes the row, channel 1 the column, and the mask marks
    /// pixels whose row and column sum is even.
    fn coordinate_sample(h: usize, w: usize) -> Sample {
        let mut img = RgbImage::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                img.set(0, i, j, i as f32 / 255.0);
                img.set(1, i, j, j as f32 / 255.0);
            }
        }
        Sample::new("c", img, BinaryMask::from_fn(h, w, |i, j| (i + j) % 2 == 0)).unwrap()
    }

    #[test]
    fn full_size_crop_without_flips_is_identity() {
        let s = coordinate_sample(12, 12);
        let cfg = AugmentConfig { crop_size: 12, hflip_prob: 0.0, vflip_prob: 0.0, ..Default::default() };
        let out = random_crop_flip(&s, &cfg, &mut sample_rng(1, 0, 0)).unwrap();
        assert_eq!((out.image, out.mask), (s.image, s.mask));
    }

    #[test]
    fn image_and_mask_stay_aligned() {
        let s = coordinate_sample(20, 17);
        let cfg = AugmentConfig { crop_size: 9, ..Default::default() };
        for k in 0..30 {
            let out = random_crop_flip(&s, &cfg, &mut sample_rng(3, 0, k)).unwrap();
            assert!(out.mask.count_ones() <= s.mask.count_ones());
            for i in 0..9 {
                for j in 0..9 {
                    let si = (out.image.get(0, i, j) * 255.0).round() as usize;
                    let sj = (out.image.get(1, i, j) * 255.0).round() as usize;
                    assert_eq!(out.mask.get(i, j), s.mask.get(si, sj));
                }
            }
        }
    }

    #[test]
    fn fixed_stream_is_reproducible_and_oversized_crop_fails() {
        let s = coordinate_sample(16, 16);
        let cfg = AugmentConfig { crop_size: 8, ..Default::default() };
        let a = random_crop_flip(&s, &cfg, &mut sample_rng(5, 2, 7)).unwrap();
        let b = random_crop_flip(&s, &cfg, &mut sample_rng(5, 2, 7)).unwrap();
        assert_eq!(a, b);
        let big = AugmentConfig { crop_size: 17, ..Default::default() };
        assert!(random_crop_flip(&s, &big, &mut sample_rng(5, 2, 7)).is_err());
    }
}
