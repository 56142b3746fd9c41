//! Reading and writing rasters: RGB images, binary masks, 8-bit grayscale
//! maps and palette-indexed direction maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::label_gen::{BinaryMask, DirectionMap};
use crate::{Error, Result};

/// Palette colours for direction classes 0-3 and the non-road class 4.
pub const DIRECTION_PALETTE: [[u8; 3]; 5] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [0, 0, 0],
];

/// An RGB image stored planar (`3 x H x W`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "RGB image of {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f32) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    fn remap(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut out = Self::zeros(height, width);
        for c in 0..3 {
            for i in 0..height {
                for j in 0..width {
                    let (si, sj) = src(i, j);
                    out.set(c, i, j, self.get(c, si, sj));
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        self.remap(height, width, |i, j| (top + i, left + j))
    }

    pub fn flip_horizontal(&self) -> Self {
        self.remap(self.height, self.width, |i, j| (i, self.width - 1 - j))
    }

    pub fn flip_vertical(&self) -> Self {
        self.remap(self.height, self.width, |i, j| (self.height - 1 - i, j))
    }

    /// Zero-pads at the bottom and right.
    pub fn pad_to(&self, height: usize, width: usize) -> Self {
        let mut out = Self::zeros(height, width);
        for c in 0..3 {
            for i in 0..self.height {
                for j in 0..self.width {
                    out.set(c, i, j, self.get(c, i, j));
                }
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let p = self.height * self.width;
        (0..p)
            .flat_map(|k| (0..3).map(move |c| (c, k)))
            .map(|(c, k)| (self.data[c * p + k].clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let p = w * h;
    let mut data = vec![0.0; 3 * p];
    for (k, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * p + k] = px.0[c] as f32 / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

/// Reads a mask image; luma values above 127 are road.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| u8::from(v > 127)).collect();
    BinaryMask::new(h, w, data).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_gray(path: &Path, height: usize, width: usize, values: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    image::save_buffer(path, values, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::image(path, e))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::image(path, e))
}

/// Writes a mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let values: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    write_gray(path, mask.height(), mask.width(), &values)
}

/// Writes class indices 0-4 as an 8-bit palette PNG.
pub fn write_direction_map(path: &Path, map: &DirectionMap) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), map.width() as u32, map.height() as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(DIRECTION_PALETTE.concat());
    let png_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(map.classes()).map_err(png_err)
}

/// Reads the raw palette indices written by [`write_direction_map`].
pub fn read_direction_map(path: &Path) -> Result<DirectionMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let bad = |e: String| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(bad("not an 8-bit indexed direction map".into()));
    }
    buf.truncate(info.buffer_size());
    DirectionMap::new(info.height as usize, info.width as usize, buf).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_gen::{direction_map_conv, DirectionParams};

    #[test]
    fn mask_and_direction_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BinaryMask::from_fn(20, 24, |i, j| (8..12).contains(&i) || j == 3);
        write_mask(&dir.path().join("m.png"), &mask).unwrap();
        assert_eq!(read_mask(&dir.path().join("m.png")).unwrap(), mask);
        let d = direction_map_conv(&mask, &DirectionParams::default());
        let p = dir.path().join("sub/d.png");
        write_direction_map(&p, &d).unwrap();
        assert_eq!(read_direction_map(&p).unwrap(), d);
    }

    #[test]
    fn rgb_round_trip_is_exact_on_8_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data = (0..3 * 5 * 7).map(|k| ((k * 37) % 256) as f32 / 255.0).collect();
        let img = RgbImage::new(5, 7, data).unwrap();
        let p = dir.path().join("x.png");
        write_rgb(&p, &img).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), img);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = read_rgb(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
