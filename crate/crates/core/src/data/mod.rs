//! Image / edge-label pairs: loading, PNG I/O, augmentation and the synthetic
//! shapes corpus.

mod augment;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{EdgeMap, RgbImage};

pub use augment::{augment, flip_horizontal, flip_image_horizontal, reflect_pad, resample_gt_max, resize_image, AugmentationPolicy};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: RgbImage,
    pub gt: EdgeMap,
    pub id: String,
}

impl Sample {
    pub fn new(image: RgbImage, gt: EdgeMap, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if image.dims() != gt.dims() {
            return Err(Error::Dataset(format!(
                "{id}: image is {:?} but ground truth is {:?}",
                image.dims(),
                gt.dims()
            )));
        }
        Ok(Self { image, gt, id })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    /// `root/images/{id}.png` with `root/edges/{id}.png`.
    #[default]
    PairedPng,
    /// A text file of tab-separated `image<TAB>gt` paths relative to its
    /// directory. `root` may be the file itself or a directory holding
    /// `list.txt`.
    ListFile,
}

/// Reads an 8- or 16-bit PNG as RGB in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = RgbImage::zeros(h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, p.0[c].clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Reads a grayscale PNG edge map, rescaling integer levels to `[0, 1]`.
pub fn read_edge_png(path: &Path) -> Result<EdgeMap> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let g = img.to_luma32f();
    let (w, h) = (g.width() as usize, g.height() as usize);
    EdgeMap::new(h, w, g.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Quantizes `round(p * 255)` into an 8-bit grayscale PNG.
pub fn write_edge_png(path: &Path, e: &EdgeMap) -> Result<()> {
    let bytes: Vec<u8> = e.data().iter().map(|&p| (p * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(e.width() as u32, e.height() as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_rgb_png(path: &Path, im: &RgbImage) -> Result<()> {
    let (h, w) = im.dims();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (im.get(c, y as usize, x as usize) * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

fn pairs_from_dirs(root: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let images = png_stems(&root.join("images"))?;
    let edges_dir = root.join("edges");
    let edges = png_stems(&edges_dir)?;
    for (id, _) in &edges {
        if !images.iter().any(|(i, _)| i == id) {
            return Err(Error::Dataset(format!("{id}: ground truth without an image")));
        }
    }
    images
        .into_iter()
        .map(|(id, img)| {
            let gt = edges_dir.join(format!("{id}.png"));
            if !gt.is_file() {
                return Err(Error::Dataset(format!(
                    "{id}: missing ground truth {}",
                    gt.display()
                )));
            }
            Ok((id, img, gt))
        })
        .collect()
}

fn pairs_from_list(root: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let list = if root.is_dir() {
        root.join("list.txt")
    } else {
        root.to_path_buf()
    };
    let base = list.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(img), Some(gt), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Dataset(format!(
                "{}:{}: expected `image<TAB>gt`",
                list.display(),
                n + 1
            )));
        };
        let img = base.join(img.trim());
        let gt = base.join(gt.trim());
        let id = img.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        if !gt.is_file() {
            return Err(Error::Dataset(format!("{id}: missing ground truth {}", gt.display())));
        }
        out.push((id, img, gt));
    }
    Ok(out)
}

/// Loads every pair under `root`, sorted by id (paired layout) or in list
/// order. Unreadable images are skipped with a warning; it is an error if
/// nothing remains.
pub fn load_dataset(root: &Path, layout: DatasetLayout) -> Result<Vec<Sample>> {
    if !root.exists() {
        return Err(Error::Dataset(format!("{} does not exist", root.display())));
    }
    let pairs = match layout {
        DatasetLayout::PairedPng => pairs_from_dirs(root)?,
        DatasetLayout::ListFile => pairs_from_list(root)?,
    };
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("no samples found under {}", root.display())));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (id, img_path, gt_path) in pairs {
        let image = match read_rgb_png(&img_path) {
            Ok(im) => im,
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                continue;
            }
        };
        let gt = read_edge_png(&gt_path)?;
        out.push(Sample::new(image, gt, id)?);
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "every image under {} was unreadable",
            root.display()
        )));
    }
    Ok(out)
}

/// Writes samples in the paired layout.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "edges"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        write_rgb_png(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_edge_png(&root.join("edges").join(format!("{}.png", s.id)), &s.gt)?;
    }
    Ok(())
}
