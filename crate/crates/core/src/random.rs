//! Seeded randomness. Every stochastic operation takes an explicit generator.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub type Generator = ChaCha8Rng;

/// Generator for an independent stream derived from `(seed, stream)`.
pub fn generator(seed: u64, stream: u64) -> Generator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Tensor of i.i.d. standard normal draws.
pub fn standard_normal(dims: &[usize], rng: &mut impl Rng, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, dims, device)?)
}

/// Tensor of i.i.d. uniform draws on `[-bound, bound)`.
pub fn uniform(dims: &[usize], bound: f32, rng: &mut impl Rng, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * bound)
        .collect();
    Ok(Tensor::from_vec(data, dims, device)?)
}
