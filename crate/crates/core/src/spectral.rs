//! Reference 2D real-input FFT built on `rustfft`.
//!
//! The trainable filter in [`crate::denoiser`] evaluates the same transform as
//! dense DFT products so that autograd can differentiate through it. This
//! module is the independent FFT route: the self-test and the test-suite check
//! the two against each other.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Number of retained columns in the half-spectrum of a width-`w` signal.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Row-major `h x (w/2 + 1)` half-spectrum of a real `h x w` signal.
pub fn rfft2(x: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    if x.len() != h * w {
        return Err(Error::invalid(format!("rfft2: {} values for {h}x{w}", x.len())));
    }
    let l = half_width(w);
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut half = vec![Complex64::new(0.0, 0.0); h * l];
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        for (r, &v) in row.iter_mut().zip(&x[y * w..(y + 1) * w]) {
            *r = Complex64::new(v, 0.0);
        }
        row_fft.process(&mut row);
        half[y * l..(y + 1) * l].copy_from_slice(&row[..l]);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for k in 0..l {
        for y in 0..h {
            col[y] = half[y * l + k];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            half[y * l + k] = col[y];
        }
    }
    Ok(half)
}

/// Inverse of [`rfft2`]. The spectrum is read as Hermitian, so imaginary parts
/// on the self-conjugate columns (DC and, for even `w`, Nyquist) are ignored.
pub fn irfft2(spec: &[Complex64], h: usize, w: usize) -> Result<Vec<f64>> {
    let l = half_width(w);
    if spec.len() != h * l {
        return Err(Error::invalid(format!(
            "irfft2: {} bins for a {h}x{w} signal",
            spec.len()
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let col_ifft = planner.plan_fft_inverse(h);
    let row_ifft = planner.plan_fft_inverse(w);

    let mut half = spec.to_vec();
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for k in 0..l {
        for y in 0..h {
            col[y] = half[y * l + k];
        }
        col_ifft.process(&mut col);
        for y in 0..h {
            half[y * l + k] = col[y];
        }
    }
    let mut out = vec![0.0; h * w];
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        let z = &half[y * l..(y + 1) * l];
        row[0] = Complex64::new(z[0].re, 0.0);
        for k in 1..l {
            if 2 * k == w {
                row[k] = Complex64::new(z[k].re, 0.0);
            } else {
                row[k] = z[k];
                row[w - k] = z[k].conj();
            }
        }
        row_ifft.process(&mut row);
        let scale = 1.0 / (h * w) as f64;
        for (o, r) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
            *o = r.re * scale;
        }
    }
    Ok(out)
}

/// `F + IFFT(W o FFT(F))` for a `(C, H, W)` feature map and a `(C, H, W/2+1)`
/// complex weight map given as separate real and imaginary parts.
pub fn filter_reference(
    feature: &[f32],
    (c, h, w): (usize, usize, usize),
    weight_re: &[f32],
    weight_im: &[f32],
) -> Result<Vec<f32>> {
    let l = half_width(w);
    if feature.len() != c * h * w || weight_re.len() != c * h * l || weight_im.len() != c * h * l {
        return Err(Error::invalid("filter_reference: inconsistent buffer sizes"));
    }
    let mut out = Vec::with_capacity(feature.len());
    for ch in 0..c {
        let plane: Vec<f64> = feature[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mut spec = rfft2(&plane, h, w)?;
        for (i, s) in spec.iter_mut().enumerate() {
            let wt = Complex64::new(weight_re[ch * h * l + i] as f64, weight_im[ch * h * l + i] as f64);
            *s *= wt;
        }
        let filtered = irfft2(&spec, h, w)?;
        out.extend(plane.iter().zip(&filtered).map(|(a, b)| (a + b) as f32));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook O(N^2) DFT.
    fn naive_dft2(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = Vec::new();
        for k in 0..h {
            for m in 0..half_width(w) {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let phase = -2.0 * std::f64::consts::PI
                            * ((k * y) as f64 / h as f64 + (m * xx) as f64 / w as f64);
                        acc += Complex64::from_polar(x[y * w + xx], phase);
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    fn signal(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| ((i * 7919) % 23) as f64 / 23.0 - 0.4).collect()
    }

    #[test]
    fn rfft2_matches_naive_dft() {
        for &(h, w) in &[(4, 6), (5, 7), (8, 8)] {
            let x = signal(h, w);
            let fast = rfft2(&x, h, w).unwrap();
            let slow = naive_dft2(&x, h, w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn irfft2_inverts_rfft2() {
        for &(h, w) in &[(4, 6), (5, 7), (6, 10)] {
            let x = signal(h, w);
            let back = irfft2(&rfft2(&x, h, w).unwrap(), h, w).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_is_identity() {
        let (c, h, w) = (2, 4, 6);
        let f: Vec<f32> = (0..c * h * w).map(|i| i as f32 * 0.1).collect();
        let zeros = vec![0.0; c * h * half_width(w)];
        assert_eq!(filter_reference(&f, (c, h, w), &zeros, &zeros).unwrap(), f);
    }
}
