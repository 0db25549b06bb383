use candle_core::{Device, Tensor, Var};
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use latent_edge::denoiser::{adaptive_fft_filter, is_self_conjugate_bin, FilterWeights};
use latent_edge::random::generator;

const C: usize = 2;
const H: usize = 8;
const W: usize = 10;
const L: usize = W / 2 + 1;

/// 2-D complex transform of an `H x W` row-major grid.
fn fft2(data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(W), planner.plan_fft_inverse(H))
    } else {
        (planner.plan_fft_forward(W), planner.plan_fft_forward(H))
    };
    for r in data.chunks_mut(W) {
        row.process(r);
    }
    let mut column = vec![Complex64::default(); H];
    for x in 0..W {
        for y in 0..H {
            column[y] = data[y * W + x];
        }
        col.process(&mut column);
        for y in 0..H {
            data[y * W + x] = column[y];
        }
    }
}

/// f64 filter: half-spectrum weights, Hermitian completion of the right half,
/// real part of the inverse.
fn oracle_filter(f: &[f64], re: &[f64], im: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.len());
    for ch in 0..C {
        let plane = &f[ch * H * W..(ch + 1) * H * W];
        let mut spec: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut spec, false);
        let mut y = vec![Complex64::default(); H * W];
        for k in 0..H {
            for m in 0..L {
                let i = ch * H * L + k * L + m;
                y[k * W + m] = spec[k * W + m] * Complex64::new(re[i], im[i]);
            }
        }
        for k in 0..H {
            for m in L..W {
                y[k * W + m] = y[((H - k) % H) * W + (W - m)].conj();
            }
        }
        fft2(&mut y, true);
        let n = (H * W) as f64;
        out.extend(plane.iter().zip(&y).map(|(a, b)| a + b.re / n));
    }
    out
}

fn oracle_loss(f: &[f64], r: &[f64], re: &[f64], im: &[f64]) -> f64 {
    oracle_filter(f, re, im).iter().zip(r).map(|(o, r)| r * o.tanh()).sum()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f64::from).collect()
}

#[test]
fn filter_weight_gradients_match_an_f64_oracle() {
    let dev = Device::Cpu;
    let mut rng = generator(31, 0);
    let mut draw = |n: usize, s: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
    let f = draw(C * H * W, 1.0);
    let r = draw(C * H * W, 1.0);
    let re = draw(C * H * L, 0.5);
    let im = draw(C * H * L, 0.5);

    let wre = Var::from_vec(re.clone(), (C, H, L), &dev).unwrap();
    let wim = Var::from_vec(im.clone(), (C, H, L), &dev).unwrap();
    let weights = FilterWeights { re: wre.as_tensor().clone(), im: wim.as_tensor().clone() };
    let ft = Tensor::from_vec(f.clone(), (1, C, H, W), &dev).unwrap();
    let rt = Tensor::from_vec(r.clone(), (1, C, H, W), &dev).unwrap();
    let loss = (adaptive_fft_filter(&ft, &weights).unwrap().tanh().unwrap() * rt).unwrap().sum_all().unwrap();
    let grads = loss.backward().unwrap();
    let g_re = flat(grads.get(wre.as_tensor()).unwrap());
    let g_im = flat(grads.get(wim.as_tensor()).unwrap());

    // every free weight entry moves the loss; masked bins do not
    for ch in 0..C {
        for k in 0..H {
            for m in 0..L {
                let i = ch * H * L + k * L + m;
                assert_ne!(g_re[i], 0.0, "weight_re[{ch},{k},{m}]");
                if is_self_conjugate_bin(k, m, H, W) {
                    assert_eq!(g_im[i], 0.0, "weight_im[{ch},{k},{m}] is masked");
                } else {
                    assert_ne!(g_im[i], 0.0, "weight_im[{ch},{k},{m}]");
                }
            }
        }
    }

    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let (f, r, re, im) = (to64(&f), to64(&r), to64(&re), to64(&im));
    let mut picked = 0;
    while picked < 8 {
        let i = rng.random_range(0..C * H * L);
        let imag = rng.random_bool(0.5);
        let (k, m) = ((i / L) % H, i % L);
        if imag && is_self_conjugate_bin(k, m, H, W) {
            continue;
        }
        let h = 1e-5;
        let shifted = |d: f64| {
            let (mut a, mut b) = (re.clone(), im.clone());
            if imag {
                b[i] += d;
            } else {
                a[i] += d;
            }
            oracle_loss(&f, &r, &a, &b)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let analytic = if imag { g_im[i] } else { g_re[i] };
        let rel = (analytic - fd).abs() / fd.abs().max(1e-3);
        assert!(rel < 1e-3, "entry {i} imag={imag}: analytic {analytic}, finite difference {fd}, rel {rel:.2e}");
        picked += 1;
    }
}
