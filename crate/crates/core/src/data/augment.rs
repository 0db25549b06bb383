use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::maps::{EdgeMap, RgbImage};

/// Scale factors drawn by the random-scale augmentation.
pub const SCALES: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub random_flip: bool,
    pub random_scale: bool,
    pub crop_size: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            random_flip: true,
            random_scale: true,
            crop_size: 320,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size % 4 != 0 {
            return Err(Error::Config(format!(
                "augmentation.crop_size = {} must be a positive multiple of 4",
                self.crop_size
            )));
        }
        Ok(())
    }
}

pub fn flip_horizontal(e: &EdgeMap) -> EdgeMap {
    let w = e.width();
    EdgeMap::from_fn(e.height(), w, |y, x| e.get(y, w - 1 - x))
}

pub fn flip_image_horizontal(im: &RgbImage) -> RgbImage {
    let (h, w) = im.dims();
    let mut out = RgbImage::zeros(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, im.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

/// Mirror index without repeating the border sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads both maps of a sample, centred, to at least `h x w`.
pub fn reflect_pad(s: &Sample, h: usize, w: usize) -> Sample {
    let (sh, sw) = s.gt.dims();
    let (th, tw) = (h.max(sh), w.max(sw));
    let top = ((th - sh) / 2) as isize;
    let left = ((tw - sw) / 2) as isize;
    let src = |y: usize, x: usize| (reflect(y as isize - top, sh), reflect(x as isize - left, sw));
    let gt = EdgeMap::from_fn(th, tw, |y, x| {
        let (yy, xx) = src(y, x);
        s.gt.get(yy, xx)
    });
    let mut image = RgbImage::zeros(th, tw);
    for c in 0..3 {
        for y in 0..th {
            for x in 0..tw {
                let (yy, xx) = src(y, x);
                image.set(c, y, x, s.image.get(c, yy, xx));
            }
        }
    }
    Sample {
        image,
        gt,
        id: s.id.clone(),
    }
}

/// Bilinear resize (half-pixel centres).
pub fn resize_image(im: &RgbImage, nh: usize, nw: usize) -> RgbImage {
    let (h, w) = im.dims();
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let mut out = RgbImage::zeros(nh, nw);
    for y in 0..nh {
        let (y0, y1, fy) = coord(y, nh, h);
        for x in 0..nw {
            let (x0, x1, fx) = coord(x, nw, w);
            for c in 0..3 {
                let top = im.get(c, y0, x0) * (1.0 - fx) + im.get(c, y0, x1) * fx;
                let bottom = im.get(c, y1, x0) * (1.0 - fx) + im.get(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Resamples a label map by taking the maximum over each output pixel's
/// source footprint, so thin edges survive downscaling.
pub fn resample_gt_max(e: &EdgeMap, nh: usize, nw: usize) -> EdgeMap {
    let (h, w) = e.dims();
    let span = |o: usize, n_out: usize, n_in: usize| {
        let lo = o * n_in / n_out;
        let hi = ((o + 1) * n_in).div_ceil(n_out).clamp(lo + 1, n_in);
        lo..hi
    };
    EdgeMap::from_fn(nh, nw, |y, x| {
        let mut m = 0f32;
        for yy in span(y, nh, h) {
            for xx in span(x, nw, w) {
                m = m.max(e.get(yy, xx));
            }
        }
        m
    })
}

/// Random scale, reflect padding when needed, a uniform crop and a random
/// horizontal flip, applied identically to image and label.
pub fn augment(s: &Sample, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Result<Sample> {
    policy.validate()?;
    let crop = policy.crop_size;
    let mut cur = s.clone();
    if policy.random_scale {
        let scale = SCALES[rng.random_range(0..SCALES.len())];
        if scale != 1.0 {
            let (h, w) = cur.gt.dims();
            let nh = ((h as f64 * scale).round() as usize).max(1);
            let nw = ((w as f64 * scale).round() as usize).max(1);
            cur = Sample {
                image: resize_image(&cur.image, nh, nw),
                gt: resample_gt_max(&cur.gt, nh, nw),
                id: cur.id,
            };
        }
    }
    let (h, w) = cur.gt.dims();
    if h < crop || w < crop {
        cur = reflect_pad(&cur, crop, crop);
    }
    let (h, w) = cur.gt.dims();
    let y0 = rng.random_range(0..=h - crop);
    let x0 = rng.random_range(0..=w - crop);
    let mut image = cur.image.crop(y0, x0, crop, crop);
    let mut gt = cur.gt.crop(y0, x0, crop, crop);
    if policy.random_flip && rng.random::<bool>() {
        image = flip_image_horizontal(&image);
        gt = flip_horizontal(&gt);
    }
    Ok(Sample { image, gt, id: cur.id })
}
