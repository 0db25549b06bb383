//! Analytic checks that need no trained weights: sampler identities, spectral
//! filter identities, loss oracle cases and crispness of known maps.

use candle_core::{Device, Tensor};
use rand::Rng;

use crate::denoiser::{adaptive_fft_filter, FilterWeights};
use crate::diffusion::{forward_sample, reverse_std, reverse_step, DenoiserOutput, TransitionSchedule};
use crate::error::Result;
use crate::eval::average_crispness;
use crate::maps::EdgeMap;
use crate::objective::{class_balance, wce_loss, WceConfig, EPS};
use crate::random;
use crate::spectral::{filter_reference, half_width};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn failed(&self) -> usize {
        self.checks.len() - self.passed()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{tag} {:<32} {}\n", c.name, c.detail));
        }
        s.push_str(&format!("selftest: {} passed, {} failed\n", self.passed(), self.failed()));
        s
    }
}

type Check = fn(&Device) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("one_step_oracle_recovery", one_step_oracle),
    ("final_step_variance_zero", final_step_variance),
    ("reverse_step_marginal_monte_carlo", forward_marginal),
    ("single_step_schedule", single_step_schedule),
    ("fft_zero_weight_identity", fft_zero_identity),
    ("fft_unit_weight_doubling", fft_doubling),
    ("fft_dc_bin_closed_form", fft_dc_bin),
    ("fft_branch_linearity", fft_linearity),
    ("fft_matches_rustfft", fft_reference),
    ("wce_worked_example", wce_worked),
    ("wce_brute_force_oracle", wce_oracle),
    ("wce_ignore_band", wce_ignore),
    ("crispness_band_and_line", crispness),
];

pub fn run(device: &Device) -> SelftestReport {
    let checks = CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = f(device).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult { name, passed, detail }
        })
        .collect();
    SelftestReport { checks }
}

fn flat(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_vec1()?)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn one_step_oracle(dev: &Device) -> Result<(bool, String)> {
    let mut rng = random::generator(11, 0);
    let z0 = random::standard_normal(&[2, 4, 6, 6], &mut rng, dev)?;
    let n = random::standard_normal(&[2, 4, 6, 6], &mut rng, dev)?;
    let z1 = forward_sample(&z0, 1.0, &n)?;
    let out = DenoiserOutput {
        f_pred: z0.neg()?,
        n_pred: n.clone(),
    };
    let rec = reverse_step(&z1, 1.0, 1.0, &out, &(n.ones_like()? * 50.0)?)?;
    let (a, b) = (flat(&rec)?, flat(&z0)?);
    let rel = a
        .iter()
        .zip(&b)
        .map(|(x, y)| ((x - y).abs() / y.abs().max(1.0)) as f64)
        .fold(0.0, f64::max);
    Ok((rel <= 1e-6, format!("max rel err {rel:.2e}")))
}

fn final_step_variance(_: &Device) -> Result<(bool, String)> {
    let ok = [1.0, 0.5, 0.2, 1e-4].iter().all(|&t| reverse_std(t, t) == 0.0);
    Ok((ok, "std(t, dt = t) == 0".into()))
}

/// Forward sample at t = 0.5, one oracle reverse step to 0.25, compared with
/// the forward marginal at 0.25.
fn forward_marginal(dev: &Device) -> Result<(bool, String)> {
    let (z0, t, dt, n) = (0.7f64, 0.5f64, 0.25f64, 10_000usize);
    let s = t - dt;
    let mut rng = random::generator(12, 0);
    let zb = Tensor::full(z0 as f32, n, dev)?;
    let noise = random::standard_normal(&[n], &mut rng, dev)?;
    let zt = forward_sample(&zb, t, &noise)?;
    let oracle = DenoiserOutput { f_pred: zb.neg()?, n_pred: noise };
    let step_noise = random::standard_normal(&[n], &mut rng, dev)?;
    let z = flat(&reverse_step(&zt, t, dt, &oracle, &step_noise)?)?;
    let mean = z.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mean_tol = 3.0 * (s / n as f64).sqrt();
    let var_tol = 3.0 * s * (2.0 / (n - 1) as f64).sqrt();
    let ok = (mean - (1.0 - s) * z0).abs() <= mean_tol && (var - s).abs() <= var_tol;
    Ok((ok, format!("mean {mean:.4} (want {:.4}), var {var:.4} (want {s})", (1.0 - s) * z0)))
}

fn single_step_schedule(_: &Device) -> Result<(bool, String)> {
    let s = TransitionSchedule::with_steps(1);
    let steps = s.steps();
    Ok((steps == vec![(1.0, 1.0)], format!("{steps:?}")))
}

fn random_feature(dims: (usize, usize, usize, usize), seed: u64, dev: &Device) -> Result<Tensor> {
    random::standard_normal(&[dims.0, dims.1, dims.2, dims.3], &mut random::generator(seed, 0), dev)
}

fn constant_weights(c: usize, h: usize, w: usize, re: f32, dev: &Device) -> Result<FilterWeights> {
    let l = half_width(w);
    Ok(FilterWeights {
        re: Tensor::full(re, (c, h, l), dev)?,
        im: Tensor::zeros((c, h, l), candle_core::DType::F32, dev)?,
    })
}

fn fft_zero_identity(dev: &Device) -> Result<(bool, String)> {
    let f = random_feature((2, 3, 8, 10), 13, dev)?;
    let w = FilterWeights::zeros(3, 8, 10, dev)?;
    let d = max_abs_diff(&flat(&adaptive_fft_filter(&f, &w)?)?, &flat(&f)?);
    Ok((d == 0.0, format!("max diff {d:.2e}")))
}

fn fft_doubling(dev: &Device) -> Result<(bool, String)> {
    let f = random_feature((1, 2, 8, 9), 14, dev)?;
    let w = constant_weights(2, 8, 9, 1.0, dev)?;
    let d = max_abs_diff(&flat(&adaptive_fft_filter(&f, &w)?)?, &flat(&(&f * 2.0)?)?);
    Ok((d <= 1e-5, format!("max diff {d:.2e}")))
}

fn fft_dc_bin(dev: &Device) -> Result<(bool, String)> {
    let (c, h, w) = (2, 6, 8);
    let l = half_width(w);
    let a = 0.75f32;
    let mut re = vec![0f32; c * h * l];
    for ch in 0..c {
        re[ch * h * l] = a;
    }
    let weights = FilterWeights {
        re: Tensor::from_vec(re, (c, h, l), dev)?,
        im: Tensor::zeros((c, h, l), candle_core::DType::F32, dev)?,
    };
    let f = random_feature((1, c, h, w), 15, dev)?;
    let got = flat(&adaptive_fft_filter(&f, &weights)?)?;
    let x = flat(&f)?;
    let mut want = Vec::with_capacity(x.len());
    for plane in x.chunks(h * w) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
        want.extend(plane.iter().map(|&v| (v as f64 + a as f64 * mean) as f32));
    }
    let d = max_abs_diff(&got, &want);
    Ok((d <= 1e-5, format!("max diff {d:.2e}")))
}

fn fft_linearity(dev: &Device) -> Result<(bool, String)> {
    let dims = (1, 2, 8, 8);
    let l = half_width(8);
    let mut rng = random::generator(16, 0);
    let weights = FilterWeights {
        re: random::standard_normal(&[2, 8, l], &mut rng, dev)?,
        im: random::standard_normal(&[2, 8, l], &mut rng, dev)?,
    };
    let f = random_feature(dims, 17, dev)?;
    let g = random_feature(dims, 18, dev)?;
    let branch = |x: &Tensor| -> Result<Tensor> { Ok((adaptive_fft_filter(x, &weights)? - x)?) };
    let (a, b) = (1.5, -0.75);
    let lhs = branch(&((&f * a)? + (&g * b)?)?)?;
    let rhs = ((branch(&f)? * a)? + (branch(&g)? * b)?)?;
    let d = max_abs_diff(&flat(&lhs)?, &flat(&rhs)?);
    Ok((d <= 1e-5, format!("max diff {d:.2e}")))
}

fn fft_reference(dev: &Device) -> Result<(bool, String)> {
    let (c, h, w) = (2, 6, 10);
    let l = half_width(w);
    let mut rng = random::generator(19, 0);
    let re: Vec<f32> = (0..c * h * l).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut im: Vec<f32> = (0..c * h * l).map(|_| rng.random_range(-1.0..1.0)).collect();
    for ch in 0..c {
        for k in 0..h {
            for m in 0..l {
                if crate::denoiser::is_self_conjugate_bin(k, m, h, w) {
                    im[ch * h * l + k * l + m] = 0.0;
                }
            }
        }
    }
    let f = random_feature((1, c, h, w), 20, dev)?;
    let x = flat(&f)?;
    let want = filter_reference(&x, (c, h, w), &re, &im)?;
    let weights = FilterWeights {
        re: Tensor::from_vec(re, (c, h, l), dev)?,
        im: Tensor::from_vec(im, (c, h, l), dev)?,
    };
    let d = max_abs_diff(&flat(&adaptive_fft_filter(&f, &weights)?)?, &want);
    Ok((d <= 1e-4, format!("max diff {d:.2e}")))
}

fn wce_worked(_: &Device) -> Result<(bool, String)> {
    let gt = EdgeMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0])?;
    let pred = EdgeMap::new(2, 2, vec![0.8, 0.1, 0.1, 0.1])?;
    let l = wce_loss(&pred, &gt, &WceConfig::default())?;
    Ok(((l - 0.2543).abs() < 1e-4, format!("loss {l:.6}")))
}

fn wce_oracle(_: &Device) -> Result<(bool, String)> {
    let cfg = WceConfig::default();
    let mut rng = random::generator(21, 0);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let gt: Vec<f32> = (0..h * w)
            .map(|_| match rng.random_range(0..3) {
                0 => 0.0,
                1 => rng.random_range(0.0..1.0),
                _ => 1.0,
            })
            .collect();
        let pred: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let n_pos = gt.iter().filter(|&&g| g as f64 >= cfg.eta).count();
        let n_neg = gt.iter().filter(|&&g| g == 0.0).count();
        let (alpha, beta) = class_balance(n_pos, n_neg, cfg.lambda);
        let mut want = 0.0;
        for (&g, &p) in gt.iter().zip(&pred) {
            let p = (p as f64).clamp(EPS, 1.0 - EPS);
            if g as f64 >= cfg.eta {
                want -= beta * p.ln();
            } else if g == 0.0 {
                want -= alpha * (1.0 - p).ln();
            }
        }
        let got = wce_loss(&EdgeMap::new(h, w, pred)?, &EdgeMap::new(h, w, gt)?, &cfg)?;
        worst = worst.max((got - want).abs());
    }
    Ok((worst <= 1e-6, format!("max abs err {worst:.2e} over 100 maps")))
}

fn wce_ignore(_: &Device) -> Result<(bool, String)> {
    let cfg = WceConfig::default();
    let gt = EdgeMap::new(1, 3, vec![1.0, 0.2, 0.0])?;
    let at = |p: f32| wce_loss(&EdgeMap::new(1, 3, vec![0.7, p, 0.2]).unwrap(), &gt, &cfg);
    let h = 1e-3f32;
    let fd = (at(0.5 + h)? - at(0.5 - h)?) / (2.0 * h as f64);
    Ok((fd.abs() <= 1e-8, format!("finite-difference gradient {fd:.2e}")))
}

fn crispness(_: &Device) -> Result<(bool, String)> {
    let band = EdgeMap::from_fn(32, 32, |_, x| if (14..17).contains(&x) { 1.0 } else { 0.0 });
    let line = EdgeMap::from_fn(32, 32, |_, x| if x == 15 { 1.0 } else { 0.0 });
    let (a, b) = (average_crispness(&band), average_crispness(&line));
    Ok(((a - 1.0 / 3.0).abs() <= 0.02 && b == 1.0, format!("band {a:.4}, line {b}")))
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        let r = super::run(&candle_core::Device::Cpu);
        assert_eq!(r.failed(), 0, "{}", r.render());
    }
}
