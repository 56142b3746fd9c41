//! Training samples: a procedural synthetic road generator, loaders for
//! common folder layouts, and crop/flip augmentation.

mod augment;
mod folder;
mod synth;

pub use augment::{random_crop_flip, sample_rng, AugmentConfig};
pub use folder::{load_folder_dataset, FolderDataset, Layout, LoadReport};
pub use synth::{read_manifest, synth_generate, synth_sample, write_dataset, SynthConfig, SynthManifest, MANIFEST};

use crate::io::RgbImage;
use crate::label_gen::BinaryMask;
use crate::tensor::{Real, Shape, Tensor};
use crate::{Error, Result};

/// An RGB image in `[0, 1]` with its road mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: RgbImage, mask: BinaryMask) -> Result<Self> {
        let id = id.into();
        if image.height != mask.height() || image.width != mask.width() {
            return Err(Error::Data(format!(
                "sample {id}: image is {}x{} but mask is {}x{}",
                image.height,
                image.width,
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Maps an intensity in `[0, 1]` to the network input range `[-2, 2]`.
pub fn normalize_pixel(v: f32) -> f32 {
    (v - 0.5) * 4.0
}

/// Stacks normalized images into a `3 x N x H x W` network input.
pub fn batch_images<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut out = Tensor::zeros(Shape::new(3, images.len(), h, w));
    for (n, img) in images.iter().enumerate() {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            for (d, &v) in out.plane_mut(c, n).iter_mut().zip(img.plane(c)) {
                *d = T::lit(normalize_pixel(v) as f64);
            }
        }
    }
    Ok(out)
}
