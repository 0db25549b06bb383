//! Dense single-channel edge maps and planar RGB images.
//!
//! Both types are row-major `f32` buffers. They are the plain-data currency of
//! the crate: datasets produce them, the evaluation suite consumes them, and the
//! network modules convert them to and from `(B, C, H, W)` tensors at the
//! boundary.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

/// Single-channel edge probability map with values in `[0, 1]`.
///
/// Ground truths may carry soft values (averages over several annotators).
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl EdgeMap {
    /// Builds a map, rejecting a wrong buffer length or values outside `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "edge map buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "edge map value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    /// Builds a map from `f(y, x)`; values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Sets a value, clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// Boolean map of `value >= threshold`.
    pub fn binarize(&self, threshold: f32) -> Vec<bool> {
        self.data.iter().map(|&v| v >= threshold).collect()
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (1, 1, self.height, self.width),
            device,
        )?)
    }

    /// Accepts `(H, W)`, `(1, H, W)` or `(1, 1, H, W)`; clamps into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        let (h, w) = match dims.as_slice() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => {
                return Err(Error::invalid(format!(
                    "cannot view tensor of shape {dims:?} as an edge map"
                )))
            }
        };
        let data: Vec<f32> = t
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }
}

/// Planar (channel-major) RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "rgb buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (1, 3, self.height, self.width),
            device,
        )?)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut out = Self::zeros(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        out
    }
}

/// Stacks equally sized edge maps into a `(B, 1, H, W)` tensor.
pub fn stack_edge_maps(maps: &[&EdgeMap], device: &Device) -> Result<Tensor> {
    let (h, w) = maps
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?
        .dims();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dims() != (h, w) {
            return Err(Error::invalid("edge maps in a batch must share dimensions"));
        }
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::from_vec(data, (maps.len(), 1, h, w), device)?)
}

/// Stacks equally sized images into a `(B, 3, H, W)` tensor.
pub fn stack_images(images: &[&RgbImage], device: &Device) -> Result<Tensor> {
    let (h, w) = images
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?
        .dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if im.dims() != (h, w) {
            return Err(Error::invalid("images in a batch must share dimensions"));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}
