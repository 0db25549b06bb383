//! 2D convolution as `im2col` followed by a single matmul over the batch.
//!
//! `im2col` is a custom op whose backward pass is `col2im`, so gradients for
//! both the input and the kernel go through the matmul kernels. On a CPU this
//! is several times faster than a direct convolution backward pass.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Im2Col {
    kernel: usize,
    stride: usize,
    pad: usize,
    height: usize,
    width: usize,
}

impl Im2Col {
    fn out_dims(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Output columns `ox` whose source column `ox * stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize, wo: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let last_src = self.width as isize - 1 + self.pad as isize - kx as isize;
        if last_src < 0 {
            return (0, 0);
        }
        let hi = ((last_src as usize) / self.stride + 1).min(wo);
        (lo.min(hi), hi)
    }

    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }
}

struct Col2Im(Im2Col);

fn contiguous_f32<'a>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = storage.as_slice::<f32>()?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(storage, layout)?;
        let (b, c, h, w) = layout.shape().dims4()?;
        let (ho, wo) = self.out_dims();
        let k = self.kernel;
        let rows = c * k * k;
        let cols = ho * wo;
        let mut out = vec![0f32; b * rows * cols];
        for bi in 0..b {
            for ci in 0..c {
                let src = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst = &mut out[(row * b + bi) * cols..(row * b + bi + 1) * cols];
                        let (lo, hi) = self.valid_cols(kx, wo);
                        for oy in 0..ho {
                            let Some(iy) = self.src_row(oy, ky) else { continue };
                            let srow = &src[iy * w..(iy + 1) * w];
                            let drow = &mut dst[oy * wo..(oy + 1) * wo];
                            if self.stride == 1 {
                                let ix0 = lo + kx - self.pad;
                                drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + (hi - lo)]);
                            } else {
                                for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                                    *d = srow[ox * self.stride + kx - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((rows, b * cols))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(*self))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let g = contiguous_f32(storage, layout)?;
        let (rows, bcols) = layout.shape().dims2()?;
        let k = p.kernel;
        let c = rows / (k * k);
        let (ho, wo) = p.out_dims();
        let cols = ho * wo;
        let b = bcols / cols;
        let (h, w) = (p.height, p.width);
        if b * cols != bcols {
            candle_core::bail!("col2im: {bcols} columns for a {ho}x{wo} output");
        }
        let mut out = vec![0f32; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let dst = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let src = &g[(row * b + bi) * cols..(row * b + bi + 1) * cols];
                        let (lo, hi) = p.valid_cols(kx, wo);
                        for oy in 0..ho {
                            let Some(iy) = p.src_row(oy, ky) else { continue };
                            let drow = &mut dst[iy * w..(iy + 1) * w];
                            let srow = &src[oy * wo..(oy + 1) * wo];
                            for ox in lo..hi {
                                drow[ox * p.stride + kx - p.pad] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, h, w))))
    }
}

/// `x: (B, Cin, H, W)`, `weight: (Cout, Cin, k, k)`, optional `bias: (Cout,)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let (c_out, wc_in, kh, kw) = weight.dims4()?;
    if wc_in != c_in || kh != kw {
        return Err(Error::ShapeMismatch {
            expected: vec![c_out, c_in, kh, kh],
            actual: weight.dims().to_vec(),
        });
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::invalid(format!(
            "conv2d: kernel {kh} stride {stride} pad {pad} does not fit a {h}x{w} input"
        )));
    }
    let op = Im2Col {
        kernel: kh,
        stride,
        pad,
        height: h,
        width: w,
    };
    let (ho, wo) = op.out_dims();
    // (C_in k k, B Ho Wo): one GEMM for the whole batch, forward and backward
    let cols = if kh == 1 && stride == 1 && pad == 0 {
        x.transpose(0, 1)?.reshape((c_in, b * h * w))?
    } else {
        x.contiguous()?.apply_op1(op)?
    };
    let y = weight.reshape((c_out, c_in * kh * kw))?.matmul(&cols)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((c_out, 1))?)?,
        None => y,
    };
    Ok(y.reshape((c_out, b, ho, wo))?.transpose(0, 1)?.contiguous()?)
}
