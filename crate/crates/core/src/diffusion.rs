//! Decoupled continuous-time diffusion in latent space.
//!
//! The forward process moves a clean latent `z_0` along an explicit transition
//! `f` plus a Wiener term:
//!
//! ```text
//! z_t = z_0 + \int_0^t f ds + sqrt(t) n,     n ~ N(0, I)
//! ```
//!
//! With the constant transition `f = -z_0` this is `(1 - t) z_0 + sqrt(t) n`,
//! which reaches pure noise at `t = 1`. The reverse step from `t` to `t - dt`
//! given predictions `(f_pred, n_pred)` is Gaussian with
//!
//! ```text
//! mean = z_t - dt f_pred - (dt / sqrt(t)) n_pred
//! var  = dt (t - dt) / t
//! ```
//!
//! so the step with `dt == t` is deterministic and lands on the predicted
//! clean latent.

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random;

/// Shape of the transition function `f_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    /// `f_t = -z_0` for all `t`.
    #[default]
    Constant,
}

/// Time parameterization and step grid of the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitionSchedule {
    pub t_min: f64,
    pub t_max: f64,
    pub num_steps: usize,
    pub transition_kind: TransitionKind,
    /// Inject `N(0, var)` noise at intermediate reverse steps. When `false`
    /// the sampler follows the mean path.
    pub inject_noise: bool,
}

impl Default for TransitionSchedule {
    fn default() -> Self {
        Self {
            t_min: 1e-4,
            t_max: 1.0,
            num_steps: 5,
            transition_kind: TransitionKind::Constant,
            inject_noise: true,
        }
    }
}

impl TransitionSchedule {
    pub fn with_steps(num_steps: usize) -> Self {
        Self {
            num_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::Config(format!(
                "sampling: need 0 < t_min < t_max <= 1, got t_min={} t_max={}",
                self.t_min, self.t_max
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("sampling.num_steps must be positive".into()));
        }
        Ok(())
    }

    /// Evaluation times, strictly decreasing from `t_max` to `t_min`.
    ///
    /// A single-step schedule is `[t_max]`. Each step jumps to the next grid
    /// entry and the last one jumps to `0` (`dt == t`).
    pub fn grid(&self) -> Vec<f64> {
        let n = self.num_steps;
        if n == 1 {
            return vec![self.t_max];
        }
        let span = self.t_max - self.t_min;
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    self.t_min
                } else {
                    self.t_max - span * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    /// `(t, dt)` for every reverse step.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let grid = self.grid();
        grid.iter()
            .enumerate()
            .map(|(i, &t)| {
                let next = grid.get(i + 1).copied().unwrap_or(0.0);
                (t, t - next)
            })
            .collect()
    }
}

/// Decoupled network prediction: transition and noise components.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub f_pred: Tensor,
    pub n_pred: Tensor,
}

/// Anything that maps `(z_t, t, condition)` to a [`DenoiserOutput`].
pub trait Denoise {
    type Condition;

    /// `t` holds one time per batch item, or a single time shared by the batch.
    fn denoise(&self, z_t: &Tensor, t: &[f64], cond: &Self::Condition) -> Result<DenoiserOutput>;
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: a.dims().to_vec(),
            actual: b.dims().to_vec(),
        });
    }
    Ok(())
}

/// `(B, 1, 1, ...)` column holding `values[i]` for batch item `i`, or a scalar
/// broadcast when a single value is given.
pub(crate) fn per_item(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let dims = like.dims();
    let b = dims.first().copied().unwrap_or(1);
    let data: Vec<f32> = match values.len() {
        1 => vec![values[0] as f32; b],
        n if n == b => values.iter().map(|&v| v as f32).collect(),
        n => {
            return Err(Error::invalid(format!(
                "{n} per-item values for a batch of {b}"
            )))
        }
    };
    let mut shape = vec![1usize; dims.len().max(1)];
    shape[0] = b;
    Ok(Tensor::from_vec(data, shape, like.device())?)
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("time {t} outside (0, 1]")));
    }
    Ok(())
}

/// Analytic forward marginal `(1 - t) z_0 + sqrt(t) n`.
pub fn forward_sample(z0: &Tensor, t: f64, noise: &Tensor) -> Result<Tensor> {
    forward_sample_per_item(z0, &[t], noise)
}

/// [`forward_sample`] with one time per batch item (leading dimension).
pub fn forward_sample_per_item(z0: &Tensor, ts: &[f64], noise: &Tensor) -> Result<Tensor> {
    check_same_shape(z0, noise)?;
    ts.iter().try_for_each(|&t| check_time(t))?;
    let drift: Vec<f64> = ts.iter().map(|t| 1.0 - t).collect();
    let scale: Vec<f64> = ts.iter().map(|t| t.sqrt()).collect();
    let a = per_item(&drift, z0)?;
    let s = per_item(&scale, z0)?;
    Ok((z0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
}

/// Standard deviation of the reverse step from `t` to `t - dt`.
pub fn reverse_std(t: f64, dt: f64) -> f64 {
    if dt >= t {
        0.0
    } else {
        (dt * (t - dt) / t).sqrt()
    }
}

/// Reverse transition from `t` to `t - dt`: `mean + std * noise`.
///
/// When `dt == t` the noise term is dropped entirely.
pub fn reverse_step(
    z_t: &Tensor,
    t: f64,
    dt: f64,
    out: &DenoiserOutput,
    noise: &Tensor,
) -> Result<Tensor> {
    check_time(t)?;
    if !(dt > 0.0 && dt <= t) {
        return Err(Error::invalid(format!(
            "reverse step needs 0 < dt <= t, got dt={dt} t={t}"
        )));
    }
    check_same_shape(z_t, &out.f_pred)?;
    check_same_shape(z_t, &out.n_pred)?;
    check_same_shape(z_t, noise)?;
    let mean = ((z_t - (&out.f_pred * dt)?)? - (&out.n_pred * (dt / t.sqrt()))?)?;
    let std = reverse_std(t, dt);
    if std == 0.0 {
        return Ok(mean);
    }
    Ok((mean + (noise * std)?)?)
}

/// Clean latent implied by a prediction at time `t`:
/// `z_0 = z_t - t f_pred - sqrt(t) n_pred`.
pub fn predicted_z0(z_t: &Tensor, ts: &[f64], out: &DenoiserOutput) -> Result<Tensor> {
    check_same_shape(z_t, &out.f_pred)?;
    check_same_shape(z_t, &out.n_pred)?;
    let tt = per_item(ts, z_t)?;
    let st = per_item(&ts.iter().map(|t| t.sqrt()).collect::<Vec<_>>(), z_t)?;
    Ok(((z_t - out.f_pred.broadcast_mul(&tt)?)? - out.n_pred.broadcast_mul(&st)?)?)
}

/// Runs the reverse process from `z ~ N(0, I)` at `t_max` along the schedule.
///
/// `dims` is the full latent batch shape. Noise is drawn from `rng` in a fixed
/// order (initial state, then one draw per stochastic step).
pub fn sample<D: Denoise>(
    denoiser: &D,
    cond: &D::Condition,
    schedule: &TransitionSchedule,
    dims: &[usize],
    rng: &mut impl Rng,
    device: &Device,
) -> Result<Tensor> {
    schedule.validate()?;
    let mut z = random::standard_normal(dims, rng, device)?;
    for (t, dt) in schedule.steps() {
        let out = denoiser.denoise(&z, &[t], cond)?;
        let noise = if schedule.inject_noise && reverse_std(t, dt) > 0.0 {
            random::standard_normal(dims, rng, device)?
        } else {
            z.zeros_like()?
        };
        z = reverse_step(&z, t, dt, &out, &noise)?;
    }
    Ok(z)
}

/// [`sample`] with an independent generator per batch item, so an item's
/// result does not depend on what else is in the batch.
///
/// `item_dims` is the shape of one latent without the batch dimension.
pub fn sample_per_item<D: Denoise, R: Rng>(
    denoiser: &D,
    cond: &D::Condition,
    schedule: &TransitionSchedule,
    item_dims: &[usize],
    rngs: &mut [R],
    device: &Device,
) -> Result<Tensor> {
    schedule.validate()?;
    let mut one = vec![1];
    one.extend_from_slice(item_dims);
    let draw = |rngs: &mut [R]| -> Result<Tensor> {
        let parts = rngs
            .iter_mut()
            .map(|r| random::standard_normal(&one, r, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let mut z = draw(rngs)?;
    for (t, dt) in schedule.steps() {
        let out = denoiser.denoise(&z, &[t], cond)?;
        let noise = if schedule.inject_noise && reverse_std(t, dt) > 0.0 {
            draw(rngs)?
        } else {
            z.zeros_like()?
        };
        z = reverse_step(&z, t, dt, &out, &noise)?;
    }
    Ok(z)
}

/// Per-sample supervision for one training step.
#[derive(Clone, Debug)]
pub struct TrainingTargets {
    pub z_t: Tensor,
    pub t: Vec<f64>,
    pub f_target: Tensor,
    pub n_target: Tensor,
}

/// Draws `t ~ U(t_min, 1]` per batch item and `n ~ N(0, I)`, and builds
/// `z_t` with `f = -z_0`.
pub fn make_training_targets(z0: &Tensor, t_min: f64, rng: &mut impl Rng) -> Result<TrainingTargets> {
    let b = z0.dims().first().copied().unwrap_or(1);
    // 1 - U[0, 1) lies in (0, 1]
    let t: Vec<f64> = (0..b)
        .map(|_| t_min + (1.0 - t_min) * (1.0 - rng.random::<f64>()))
        .collect();
    let n_target = random::standard_normal(z0.dims(), rng, z0.device())?;
    let f_target = z0.neg()?;
    let z_t = forward_sample_per_item(z0, &t, &n_target)?;
    Ok(TrainingTargets {
        z_t,
        t,
        f_target,
        n_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn dev() -> Device {
        Device::Cpu
    }

    fn vec(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    /// Predicts the true components of a known `(z_0, n)` pair.
    struct Oracle {
        z0: Tensor,
    }

    impl Denoise for Oracle {
        type Condition = ();
        fn denoise(&self, z_t: &Tensor, t: &[f64], _: &()) -> Result<DenoiserOutput> {
            // n = (z_t - (1 - t) z_0) / sqrt(t)
            let t = t[0];
            let n = ((z_t - (&self.z0 * (1.0 - t))?)? / t.sqrt())?;
            Ok(DenoiserOutput {
                f_pred: self.z0.neg()?,
                n_pred: n,
            })
        }
    }

    #[test]
    fn forward_sample_examples() {
        let ones = Tensor::ones((1, 1, 2, 2), DType::F32, &dev()).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert!(vec(&forward_sample(&ones, 0.25, &zeros).unwrap()).iter().all(|&v| v == 0.75));

        let z0 = random::standard_normal(&[1, 4, 3, 3], &mut random::generator(1, 0), &dev()).unwrap();
        let near = vec(&forward_sample(&z0, 1e-4, &z0.zeros_like().unwrap()).unwrap());
        for (a, b) in near.iter().zip(vec(&z0)) {
            assert!((a - b).abs() <= 1e-4 * b.abs() + 1e-7);
        }

        let n = random::standard_normal(&[1, 4, 3, 3], &mut random::generator(2, 0), &dev()).unwrap();
        assert_eq!(vec(&forward_sample(&z0.zeros_like().unwrap(), 1.0, &n).unwrap()), vec(&n));
    }

    #[test]
    fn forward_sample_rejects_bad_input() {
        let a = Tensor::ones((1, 2), DType::F32, &dev()).unwrap();
        let b = Tensor::ones((1, 3), DType::F32, &dev()).unwrap();
        assert!(forward_sample(&a, 0.5, &b).is_err());
        assert!(forward_sample(&a, 0.0, &a).is_err());
        assert!(forward_sample(&a, 1.5, &a).is_err());
    }

    #[test]
    fn full_step_recovers_clean_latent() {
        let mut rng = random::generator(3, 0);
        let z0 = random::standard_normal(&[2, 4, 5, 5], &mut rng, &dev()).unwrap();
        let n = random::standard_normal(&[2, 4, 5, 5], &mut rng, &dev()).unwrap();
        let z1 = forward_sample(&z0, 1.0, &n).unwrap();
        let out = DenoiserOutput {
            f_pred: z0.neg().unwrap(),
            n_pred: n.clone(),
        };
        let junk = (z0.ones_like().unwrap() * 100.0).unwrap();
        let rec = reverse_step(&z1, 1.0, 1.0, &out, &junk).unwrap();
        for (a, b) in vec(&rec).iter().zip(vec(&z0)) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn final_step_is_deterministic() {
        assert_eq!(reverse_std(0.3, 0.3), 0.0);
        assert_eq!(reverse_std(1.0, 1.0), 0.0);
        assert!(reverse_std(0.5, 0.25) > 0.0);
    }

    #[test]
    fn reverse_step_rejects_oversized_step() {
        let z = Tensor::ones((1, 1), DType::F32, &dev()).unwrap();
        let out = DenoiserOutput {
            f_pred: z.clone(),
            n_pred: z.clone(),
        };
        assert!(reverse_step(&z, 0.5, 0.6, &out, &z).is_err());
        assert!(reverse_step(&z, 0.5, 0.0, &out, &z).is_err());
    }

    #[test]
    fn schedule_grid_is_strictly_decreasing() {
        for n in [1, 2, 5, 50] {
            let s = TransitionSchedule::with_steps(n);
            let g = s.grid();
            assert_eq!(g.len(), n);
            assert_eq!(g[0], 1.0);
            if n > 1 {
                assert_eq!(*g.last().unwrap(), 1e-4);
            }
            assert!(g.windows(2).all(|w| w[0] > w[1]));
            let steps = s.steps();
            assert_eq!(steps.last().unwrap().0, steps.last().unwrap().1);
        }
    }

    #[test]
    fn one_step_sampling_with_oracle_is_exact() {
        let z0 = random::standard_normal(&[1, 4, 4, 4], &mut random::generator(5, 0), &dev()).unwrap();
        let oracle = Oracle { z0: z0.clone() };
        let out = sample(
            &oracle,
            &(),
            &TransitionSchedule::with_steps(1),
            &[1, 4, 4, 4],
            &mut random::generator(6, 0),
            &dev(),
        )
        .unwrap();
        for (a, b) in vec(&out).iter().zip(vec(&z0)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn multi_step_sampling_with_oracle_lands_on_clean_latent() {
        let z0 = random::standard_normal(&[1, 2, 3, 3], &mut random::generator(7, 0), &dev()).unwrap();
        let oracle = Oracle { z0: z0.clone() };
        for steps in [5, 50] {
            let out = sample(
                &oracle,
                &(),
                &TransitionSchedule::with_steps(steps),
                &[1, 2, 3, 3],
                &mut random::generator(8, 0),
                &dev(),
            )
            .unwrap();
            for (a, b) in vec(&out).iter().zip(vec(&z0)) {
                assert!((a - b).abs() < 1e-4, "{steps} steps: {a} vs {b}");
            }
        }
    }

    #[test]
    fn seeded_sampling_is_bit_identical() {
        let z0 = random::standard_normal(&[1, 2, 3, 3], &mut random::generator(9, 0), &dev()).unwrap();
        let oracle = Oracle { z0 };
        let run = || {
            vec(&sample(&oracle, &(), &TransitionSchedule::default(), &[1, 2, 3, 3], &mut random::generator(10, 0), &dev()).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_targets_invert_to_clean_latent() {
        let mut rng = random::generator(11, 0);
        let z0 = random::standard_normal(&[3, 4, 4, 4], &mut rng, &dev()).unwrap();
        let tt = make_training_targets(&z0, 1e-4, &mut rng).unwrap();
        assert_eq!(vec(&tt.f_target), vec(&z0.neg().unwrap()));
        for (i, &t) in tt.t.iter().enumerate() {
            assert!(t > 1e-4 && t <= 1.0);
            if t < 1.0 {
                let zt = tt.z_t.get(i).unwrap();
                let n = tt.n_target.get(i).unwrap();
                let rec = ((zt - (n * t.sqrt()).unwrap()).unwrap() / (1.0 - t)).unwrap();
                for (a, b) in vec(&rec).iter().zip(vec(&z0.get(i).unwrap())) {
                    assert!((a - b).abs() < 1e-3 * (1.0 + b.abs()) / (1.0 - t) as f32);
                }
            }
        }
    }
}
