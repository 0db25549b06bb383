//! Adaptive spectral filter: `F_o = F + IFFT(W o FFT(F))`.
//!
//! The weight map covers the half-spectrum of a real input (`H x (W/2 + 1)` per
//! channel), so the inverse transform is real by construction. The transforms
//! are evaluated as products with precomputed DFT matrices, which keeps the
//! whole branch differentiable; [`crate::spectral::filter_reference`] computes
//! the same map with `rustfft`.
//!
//! Imaginary weights on self-conjugate bins (rows `0` and `H/2`, columns `0`
//! and `W/2`) have no effect on a Hermitian spectrum. They are masked to zero
//! so that every remaining weight entry is a free parameter.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Init, Scope};
use crate::spectral::half_width;

/// Complex half-spectrum weight map, `(C, H, W/2 + 1)` real and imaginary parts.
#[derive(Clone, Debug)]
pub struct FilterWeights {
    pub re: Tensor,
    pub im: Tensor,
}

impl FilterWeights {
    /// All-zero weights for a `(channels, h, w)` feature map.
    pub fn zeros(channels: usize, h: usize, w: usize, device: &Device) -> Result<Self> {
        let dims = (channels, h, half_width(w));
        Ok(Self {
            re: Tensor::zeros(dims, candle_core::DType::F32, device)?,
            im: Tensor::zeros(dims, candle_core::DType::F32, device)?,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.re.dims();
        (d[0], d[1], d[2])
    }
}

/// Dense DFT factors for an `h x w` grid.
#[derive(Clone, Debug)]
struct DftMatrices {
    h: usize,
    w: usize,
    /// `(W, L)`: forward transform along rows.
    row_re: Tensor,
    row_im: Tensor,
    /// `(H, H)`: forward transform along columns.
    col_re: Tensor,
    col_im: Tensor,
    /// `(L, W)`: Hermitian inverse along rows, including the `1/(H W)` scale.
    inv_re: Tensor,
    inv_im: Tensor,
    /// `(H, L)`: zero on self-conjugate bins.
    imag_mask: Tensor,
}

impl DftMatrices {
    fn new(h: usize, w: usize, device: &Device) -> Result<Self> {
        use std::f64::consts::TAU;
        let l = half_width(w);
        let mut row_re = vec![0f32; w * l];
        let mut row_im = vec![0f32; w * l];
        let mut inv_re = vec![0f32; l * w];
        let mut inv_im = vec![0f32; l * w];
        let scale = 1.0 / (h * w) as f64;
        for x in 0..w {
            for k in 0..l {
                let phase = TAU * ((k * x) % w) as f64 / w as f64;
                row_re[x * l + k] = phase.cos() as f32;
                row_im[x * l + k] = -phase.sin() as f32;
                let mult = if k == 0 || 2 * k == w { 1.0 } else { 2.0 };
                inv_re[k * w + x] = (mult * scale * phase.cos()) as f32;
                inv_im[k * w + x] = (-mult * scale * phase.sin()) as f32;
            }
        }
        let mut col_re = vec![0f32; h * h];
        let mut col_im = vec![0f32; h * h];
        for k in 0..h {
            for y in 0..h {
                let phase = TAU * ((k * y) % h) as f64 / h as f64;
                col_re[k * h + y] = phase.cos() as f32;
                col_im[k * h + y] = -phase.sin() as f32;
            }
        }
        let mut mask = vec![1f32; h * l];
        for k in [0, h / 2] {
            for m in [0, w / 2] {
                let self_conjugate = (2 * k) % h == 0 && (2 * m) % w == 0;
                if self_conjugate {
                    mask[k * l + m] = 0.0;
                }
            }
        }
        Ok(Self {
            h,
            w,
            row_re: Tensor::from_vec(row_re, (w, l), device)?,
            row_im: Tensor::from_vec(row_im, (w, l), device)?,
            col_re: Tensor::from_vec(col_re, (h, h), device)?,
            col_im: Tensor::from_vec(col_im, (h, h), device)?,
            inv_re: Tensor::from_vec(inv_re, (l, w), device)?,
            inv_im: Tensor::from_vec(inv_im, (l, w), device)?,
            imag_mask: Tensor::from_vec(mask, (h, l), device)?,
        })
    }

    /// `IFFT(W o FFT(f))` for `f: (B, C, H, W)`.
    fn filter_branch(&self, f: &Tensor, w: &FilterWeights) -> Result<Tensor> {
        // rows: G = F R
        let g_re = f.broadcast_matmul(&self.row_re)?;
        let g_im = f.broadcast_matmul(&self.row_im)?;
        // columns: X = A G
        let x_re = (self.col_re.broadcast_matmul(&g_re)? - self.col_im.broadcast_matmul(&g_im)?)?;
        let x_im = (self.col_re.broadcast_matmul(&g_im)? + self.col_im.broadcast_matmul(&g_re)?)?;
        // Y = W o X
        let w_im = w.im.broadcast_mul(&self.imag_mask)?;
        let y_re = (x_re.broadcast_mul(&w.re)? - x_im.broadcast_mul(&w_im)?)?;
        let y_im = (x_re.broadcast_mul(&w_im)? + x_im.broadcast_mul(&w.re)?)?;
        // columns: Z = conj(A) Y
        let z_re = (self.col_re.broadcast_matmul(&y_re)? + self.col_im.broadcast_matmul(&y_im)?)?;
        let z_im = (self.col_re.broadcast_matmul(&y_im)? - self.col_im.broadcast_matmul(&y_re)?)?;
        // rows: Hermitian inverse
        Ok((z_re.broadcast_matmul(&self.inv_re)? + z_im.broadcast_matmul(&self.inv_im)?)?)
    }
}

fn check_weights(f: &Tensor, w: &FilterWeights) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, wd) = f.dims4()?;
    let expected = [c, h, half_width(wd)];
    for t in [&w.re, &w.im] {
        if t.dims() != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                actual: t.dims().to_vec(),
            });
        }
    }
    Ok((b, c, h, wd))
}

/// Residual spectral filter on `f: (B, C, H, W)`.
pub fn adaptive_fft_filter(f: &Tensor, w: &FilterWeights) -> Result<Tensor> {
    let (_, _, h, wd) = check_weights(f, w)?;
    let mats = DftMatrices::new(h, wd, f.device())?;
    Ok((f + mats.filter_branch(f, w)?)?)
}

/// Trainable filter layer for a fixed `(C, H, W)` geometry; weights start at zero.
#[derive(Clone, Debug)]
pub struct AdaptiveFftFilter {
    weights: FilterWeights,
    mats: DftMatrices,
}

impl AdaptiveFftFilter {
    pub fn new(s: &mut Scope, channels: usize, h: usize, w: usize) -> Result<Self> {
        let l = half_width(w);
        let device = s.device();
        Ok(Self {
            weights: FilterWeights {
                re: s.get("weight_re", &[channels, h, l], Init::Zeros)?,
                im: s.get("weight_im", &[channels, h, l], Init::Zeros)?,
            },
            mats: DftMatrices::new(h, w, &device)?,
        })
    }

    pub fn weights(&self) -> &FilterWeights {
        &self.weights
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = check_weights(f, &self.weights)?;
        if (h, w) != (self.mats.h, self.mats.w) {
            return Err(Error::invalid(format!(
                "filter built for {}x{}, got {h}x{w}",
                self.mats.h, self.mats.w
            )));
        }
        Ok((f + self.mats.filter_branch(f, &self.weights)?)?)
    }
}

/// Whether the imaginary weight at half-spectrum bin `(k, m)` of an `h x w` map
/// is structurally inert (masked).
pub fn is_self_conjugate_bin(k: usize, m: usize, h: usize, w: usize) -> bool {
    (2 * k) % h == 0 && (2 * m) % w == 0
}
