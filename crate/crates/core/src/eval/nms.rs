//! Non-maximum suppression along the local edge normal followed by
//! Zhang-Suen thinning.

use crate::maps::EdgeMap;

/// Separable Gaussian blur, `sigma = 1`, replicated borders.
fn gaussian_blur(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    const R: isize = 3;
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (-R..=R).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    };
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-R..=R)
                .map(|d| kernel[(d + R) as usize] * data[y * w + clampi(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-R..=R)
                .map(|d| kernel[(d + R) as usize] * tmp[clampi(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Central-difference gradients with replicated borders.
fn gradients(s: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            gx[y * w + x] = (s[y * w + xr] - s[y * w + xl]) / 2.0;
            gy[y * w + x] = (s[yd * w + x] - s[yu * w + x]) / 2.0;
        }
    }
    (gx, gy)
}

/// Bilinear sample at `(y, x)`; outside the image reads `outside(y, x)` per
/// integer corner.
fn bilinear(data: &[f64], h: usize, w: usize, y: f64, x: f64, replicate: bool) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let at = |yy: f64, xx: f64| -> f64 {
        let (yi, xi) = (yy as isize, xx as isize);
        if yi >= 0 && xi >= 0 && (yi as usize) < h && (xi as usize) < w {
            data[yi as usize * w + xi as usize]
        } else if replicate {
            data[yi.clamp(0, h as isize - 1) as usize * w + xi.clamp(0, w as isize - 1) as usize]
        } else {
            0.0
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Suppresses pixels that are not maximal along the edge normal.
///
/// The normal comes from the structure tensor of the Gaussian-smoothed map.
/// Neighbours are compared by `(value, smoothed value)`; a complete tie is
/// resolved in favour of the neighbour on the negative side, so that exactly
/// one of two equal pixels survives.
pub fn nms(e: &EdgeMap) -> EdgeMap {
    let (h, w) = e.dims();
    let raw: Vec<f64> = e.data().iter().map(|&v| v as f64).collect();
    let smooth = gaussian_blur(&raw, h, w);
    let (gx, gy) = gradients(&smooth, h, w);
    let jxx = gaussian_blur(&gx.iter().map(|g| g * g).collect::<Vec<_>>(), h, w);
    let jyy = gaussian_blur(&gy.iter().map(|g| g * g).collect::<Vec<_>>(), h, w);
    let jxy = gaussian_blur(&gx.iter().zip(&gy).map(|(a, b)| a * b).collect::<Vec<_>>(), h, w);

    EdgeMap::from_fn(h, w, |y, x| {
        let i = y * w + x;
        let v = raw[i];
        if v <= 0.0 {
            return 0.0;
        }
        let theta = 0.5 * (2.0 * jxy[i]).atan2(jxx[i] - jyy[i]);
        let (nx, ny) = (theta.cos(), theta.sin());
        let key = (v, smooth[i]);
        let (yf, xf) = (y as f64, x as f64);
        let plus = (
            bilinear(&raw, h, w, yf + ny, xf + nx, false),
            bilinear(&smooth, h, w, yf + ny, xf + nx, true),
        );
        let minus = (
            bilinear(&raw, h, w, yf - ny, xf - nx, false),
            bilinear(&smooth, h, w, yf - ny, xf - nx, true),
        );
        let beaten = |nb: (f64, f64)| nb.0 > key.0 || (nb.0 == key.0 && nb.1 > key.1);
        if beaten(plus) || beaten(minus) || minus == key {
            0.0
        } else {
            v as f32
        }
    })
}

/// Zhang-Suen skeletonization of a binary mask (pixels outside count as 0).
pub fn zhang_suen(mask: &mut [bool], h: usize, w: usize) {
    let get = |m: &[bool], y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[y as usize * w + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !mask[y as usize * w + x as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let p = [
                        get(mask, y - 1, x),
                        get(mask, y - 1, x + 1),
                        get(mask, y, x + 1),
                        get(mask, y + 1, x + 1),
                        get(mask, y + 1, x),
                        get(mask, y + 1, x - 1),
                        get(mask, y, x - 1),
                        get(mask, y - 1, x - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&k| !p[k] && p[(k + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                mask[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
}

/// NMS followed by thinning of the surviving support; survivors keep their
/// value.
pub fn nms_thin(e: &EdgeMap) -> EdgeMap {
    let (h, w) = e.dims();
    let suppressed = nms(e);
    let mut mask: Vec<bool> = suppressed.data().iter().map(|&v| v > 0.0).collect();
    zhang_suen(&mut mask, h, w);
    EdgeMap::from_fn(h, w, |y, x| if mask[y * w + x] { suppressed.get(y, x) } else { 0.0 })
}

/// `sum(nms_thin(e)) / sum(e)`, or 1 for an empty map.
pub fn average_crispness(e: &EdgeMap) -> f64 {
    let total = e.sum();
    if total == 0.0 {
        return 1.0;
    }
    (nms_thin(e).sum() / total).clamp(0.0, 1.0)
}
