//! BUS-style directory layout:
//! `<root>/{normal,benign,malignant}/<name>.png` with the mask at
//! `<name>_mask.png` next to it, both 8-bit grayscale.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma};
use log::warn;

use super::{Dataset, Label, Sample};
use crate::error::{Error, Result};

const MASK_SUFFIX: &str = "_mask";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn mask_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    image.with_file_name(format!("{stem}{MASK_SUFFIX}.png"))
}

fn open_gray(path: &Path) -> Result<GrayImage> {
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads every image/mask pair, resizing to `size × size` (bilinear for
/// images, nearest for masks). Undecodable files are skipped and listed in
/// the report; an image without a mask file is an error.
pub fn load_bus_directory(root: impl AsRef<Path>, size: usize) -> Result<(Dataset, LoadReport)> {
    let root = root.as_ref();
    if size == 0 {
        return Err(Error::config("data.image_size", "must be positive"));
    }
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let side = u32::try_from(size).map_err(|_| Error::config("data.image_size", "too large"))?;
    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.name());
        if !dir.is_dir() {
            continue;
        }
        let mut images: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| is_png(p))
            .filter(|p| {
                p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| !s.contains(MASK_SUFFIX))
            })
            .collect();
        images.sort();
        for image_path in images {
            let mask_file = mask_path(&image_path);
            if !mask_file.is_file() {
                return Err(Error::MissingMask {
                    image: image_path,
                    expected: mask_file,
                });
            }
            let (img, mask) = match (open_gray(&image_path), open_gray(&mask_file)) {
                (Ok(i), Ok(m)) => (i, m),
                (Err(e), _) | (_, Err(e)) => {
                    warn!("skipping {}: {e}", image_path.display());
                    report.skipped.push((image_path, e.to_string()));
                    continue;
                }
            };
            let img = imageops::resize(&img, side, side, FilterType::Triangle);
            let mask = imageops::resize(&mask, side, side, FilterType::Nearest);
            let mut sample = Sample {
                id: samples.len() as u64,
                label,
                height: size,
                width: size,
                image: img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect(),
                mask: mask.pixels().map(|p| u8::from(p.0[0] >= 128)).collect(),
            };
            if !label.has_lesion() && sample.lesion_pixels() > 0 {
                warn!("{}: clearing non-empty mask of a normal scan", image_path.display());
                sample.mask.fill(0);
            }
            samples.push(sample);
            report.loaded += 1;
        }
    }
    Ok((Dataset::new(samples), report))
}

/// Writes `dataset` in the BUS layout; returns the written image paths.
pub fn export_dataset(dataset: &Dataset, root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut written = Vec::new();
    for s in dataset.iter() {
        let dir = root.join(s.label.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (w, h) = (s.width as u32, s.height as u32);
        let img = GrayImage::from_fn(w, h, |x, y| {
            Luma([(s.image[(y * w + x) as usize] * 255.0).round() as u8])
        });
        let mask = GrayImage::from_fn(w, h, |x, y| Luma([s.mask[(y * w + x) as usize] * 255]));
        let path = dir.join(format!("sample_{:05}.png", s.id));
        let save = |img: &GrayImage, p: &Path| {
            img.save(p).map_err(|source| Error::Image {
                path: p.to_path_buf(),
                source,
            })
        };
        save(&img, &path)?;
        save(&mask, &mask_path(&path))?;
        written.push(path);
    }
    Ok(written)
}
