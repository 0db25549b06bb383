//! Random shapes on a textured background with exact one-pixel boundaries.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::eval::nms_thin;
use crate::maps::{EdgeMap, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Minimum gray-level gap between any two regions.
    pub min_contrast: f64,
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    /// Standard deviation of per-pixel noise.
    pub pixel_noise: f64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("synthetic: need 1 <= min_shapes <= max_shapes".into()));
        }
        if !(self.min_contrast >= 0.0 && self.min_contrast * self.max_shapes as f64 <= SHADE_HI - SHADE_LO) {
            return Err(Error::Config(format!(
                "synthetic: {} regions cannot be {} apart in gray level",
                self.max_shapes + 1,
                self.min_contrast
            )));
        }
        if self.texture < 0.0 || self.pixel_noise < 0.0 {
            return Err(Error::Config("synthetic: texture and pixel_noise must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            min_shapes: 2,
            max_shapes: 6,
            min_contrast: 0.15,
            texture: 0.06,
            pixel_noise: 0.02,
        }
    }
}

enum Shape {
    Polygon(Vec<(f64, f64)>),
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        cos: f64,
        sin: f64,
    },
}

impl Shape {
    fn random(size: f64, rng: &mut impl Rng) -> Self {
        let cx = size * rng.random_range(0.15..0.85);
        let cy = size * rng.random_range(0.15..0.85);
        let r = size * rng.random_range(0.12..0.3);
        if rng.random::<bool>() {
            let k = rng.random_range(3..=6);
            let mut angles: Vec<f64> = (0..k)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            angles.sort_by(f64::total_cmp);
            let pts = angles
                .iter()
                .map(|&a| {
                    let rr = r * rng.random_range(0.7..1.0);
                    (cx + rr * a.cos(), cy + rr * a.sin())
                })
                .collect();
            Shape::Polygon(pts)
        } else {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Ellipse {
                cx,
                cy,
                a: r,
                b: r * rng.random_range(0.45..1.0),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Polygon(pts) => {
                // even-odd ray casting
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
            Shape::Ellipse { cx, cy, a, b, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    }
}

/// Index of the topmost shape covering `(x, y)`, 0 for background.
fn label_at(shapes: &[Shape], x: f64, y: f64) -> usize {
    shapes
        .iter()
        .enumerate()
        .rev()
        .find(|(_, s)| s.contains(x, y))
        .map_or(0, |(i, _)| i + 1)
}

const SHADE_LO: f64 = 0.04;
const SHADE_HI: f64 = 0.96;

/// `n` gray levels with every pairwise gap at least `min_gap`, in random order.
fn pick_shades(n: usize, min_gap: f64, rng: &mut impl Rng) -> Vec<f64> {
    let free = (SHADE_HI - SHADE_LO - min_gap * n.saturating_sub(1) as f64).max(0.0);
    let mut offsets: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=free)).collect();
    offsets.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = offsets
        .iter()
        .enumerate()
        .map(|(i, o)| SHADE_LO + i as f64 * min_gap + o)
        .collect();
    out.shuffle(rng);
    out
}

fn one_sample(size: usize, cfg: &SyntheticConfig, id: String, rng: &mut impl Rng) -> Result<Sample> {
    let sz = size as f64;
    let k = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let shapes: Vec<Shape> = (0..k).map(|_| Shape::random(sz, rng)).collect();
    let shades = pick_shades(k + 1, cfg.min_contrast, rng);
    let tints: Vec<[f64; 3]> = (0..=k)
        .map(|_| [0; 3].map(|_: i32| rng.random_range(-0.04..0.04)))
        .collect();

    // smooth background texture: a few random plane waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.02..0.12);
            let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (freq * dir.cos(), freq * dir.sin(), phase, rng.random_range(0.5..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let texture = |x: f64, y: f64| -> f64 {
        cfg.texture * waves.iter().map(|(fx, fy, p, a)| a * (fx * x + fy * y + p).sin()).sum::<f64>() / norm
    };

    const SS: usize = 4;
    let mut labels = vec![0usize; size * size];
    let mut image = RgbImage::zeros(size, size);
    let normal = rand_distr::Normal::new(0.0, cfg.pixel_noise.max(0.0))
        .map_err(|e| Error::invalid(e.to_string()))?;
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            labels[y * size + x] = label_at(&shapes, cx, cy);
            let mut acc = [0f64; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let l = label_at(&shapes, px, py);
                    let base = shades[l] + if l == 0 { texture(px, py) } else { 0.0 };
                    for c in 0..3 {
                        acc[c] += base + tints[l][c];
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                let v = a / (SS * SS) as f64 + rng.sample(normal);
                image.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    // one-sided boundary: pixels whose 4-neighbour belongs to a lower label
    let mut gt = EdgeMap::from_fn(size, size, |y, x| {
        let l = labels[y * size + x];
        let lower = |yy: usize, xx: usize| labels[yy * size + xx] < l;
        let edge = (y > 0 && lower(y - 1, x))
            || (y + 1 < size && lower(y + 1, x))
            || (x > 0 && lower(y, x - 1))
            || (x + 1 < size && lower(y, x + 1));
        if edge {
            1.0
        } else {
            0.0
        }
    });
    loop {
        let thinned = nms_thin(&gt);
        let thinned = EdgeMap::from_fn(size, size, |y, x| if thinned.get(y, x) > 0.0 { 1.0 } else { 0.0 });
        if thinned == gt {
            break;
        }
        gt = thinned;
    }
    Sample::new(image, gt, id)
}

/// `n` synthetic samples of `size x size`, ids `synth_00000`, ...
pub fn generate_synthetic(n: usize, size: usize, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    if size == 0 || size % 4 != 0 {
        return Err(Error::invalid(format!("synthetic size {size} must be a positive multiple of 4")));
    }
    cfg.validate()?;
    (0..n)
        .map(|i| one_sample(size, cfg, format!("synth_{i:05}"), rng))
        .collect()
}
