use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::Sample;
use crate::io::{read_mask, read_rgb};
use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Directory conventions understood by [`load_folder_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `root` is a split directory such as `.../test`; masks share the image
    /// stem and live in the sibling directory `.../test_labels`.
    Massachusetts,
    /// `root` holds `<id>_sat.jpg` images and `<id>_mask.png` masks.
    DeepGlobe,
    /// `root` holds `image_<k>.*` / `mask_<k>.*` pairs (the synthetic writer's
    /// output), or `images/` and `masks/` subdirectories with matching stems.
    PairedGeneric,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "massachusetts" => Ok(Self::Massachusetts),
            "deepglobe" => Ok(Self::DeepGlobe),
            "paired-generic" | "generic" => Ok(Self::PairedGeneric),
            other => Err(Error::Param(format!(
                "unknown layout {other:?} (expected massachusetts, deepglobe or paired-generic)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Images skipped because no mask matched them.
    pub missing_masks: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    id: String,
    image: PathBuf,
    mask: PathBuf,
}

/// An indexed list of image/mask pairs, decoded on access.
#[derive(Clone, Debug)]
pub struct FolderDataset {
    entries: Vec<Entry>,
    pub report: LoadReport,
}

impl FolderDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let e = &self.entries[index];
        Sample::new(e.id.clone(), read_rgb(&e.image)?, read_mask(&e.mask)?)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files in `dir` keyed by file stem.
fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in read {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs images and masks; `image_key` maps an image stem to `(id, mask stem)`.
fn pair(
    images: &BTreeMap<String, PathBuf>,
    masks: &BTreeMap<String, PathBuf>,
    image_key: impl Fn(&str) -> Option<(String, String)>,
    report: &mut LoadReport,
) -> Vec<Entry> {
    let mut entries = Vec::new();
    for (stem, path) in images {
        let Some((id, mask_stem)) = image_key(stem) else { continue };
        match masks.get(&mask_stem) {
            Some(mask) => entries.push(Entry {
                id,
                image: path.clone(),
                mask: mask.clone(),
            }),
            None => {
                log::warn!("no mask for {}", path.display());
                report.missing_masks.push(path.clone());
            }
        }
    }
    entries
}

/// Indexes the pairs under `root` following `layout`. Images without a mask
/// are skipped and listed in the report; masks are binarized at > 127 when
/// loaded.
pub fn load_folder_dataset(root: &Path, layout: Layout) -> Result<FolderDataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", root.display())));
    }
    let mut report = LoadReport::default();
    let entries = match layout {
        Layout::Massachusetts => {
            let name = root
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Data(format!("{} has no directory name", root.display())))?;
            let labels = root.with_file_name(format!("{name}_labels"));
            let images = list_images(root)?;
            let masks = if labels.is_dir() {
                list_images(&labels)?
            } else {
                report.warnings.push(format!("label directory {} not found", labels.display()));
                BTreeMap::new()
            };
            pair(&images, &masks, |s| Some((s.to_string(), s.to_string())), &mut report)
        }
        Layout::DeepGlobe => {
            let files = list_images(root)?;
            pair(
                &files,
                &files,
                |s| s.strip_suffix("_sat").map(|id| (id.to_string(), format!("{id}_mask"))),
                &mut report,
            )
        }
        Layout::PairedGeneric => {
            let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
            if img_dir.is_dir() && mask_dir.is_dir() {
                let images = list_images(&img_dir)?;
                let masks = list_images(&mask_dir)?;
                pair(&images, &masks, |s| Some((s.to_string(), s.to_string())), &mut report)
            } else {
                let files = list_images(root)?;
                pair(
                    &files,
                    &files,
                    |s| s.strip_prefix("image_").map(|k| (s.to_string(), format!("mask_{k}"))),
                    &mut report,
                )
            }
        }
    };
    if entries.is_empty() {
        let msg = format!("no image/mask pairs found under {}", root.display());
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    Ok(FolderDataset { entries, report })
}
