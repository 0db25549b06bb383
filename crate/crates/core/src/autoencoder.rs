//! Edge-map autoencoder: 4x spatial compression into a small latent code.
//!
//! Both stages are space-to-depth / depth-to-space pairs around 3x3
//! convolutions, so most of the work happens at 1/4 resolution. Latents are
//! multiplied by a global `normalization_scale` (fitted after training) so that
//! they have roughly unit variance, matching the unit-variance noise of the
//! diffusion process.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, AugmentationPolicy, Sample};
use crate::error::{Error, Result};
use crate::maps::{stack_edge_maps, EdgeMap};
use crate::nn::{pixel_shuffle, pixel_unshuffle, sigmoid, Conv2d, ResBlock, VarStore};
use crate::objective::class_balance;
use crate::random;
use crate::train::{cosine_lr, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub latent_channels: usize,
    pub base_width: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_width: 32,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::Config("autoencoder.latent_channels must be >= 1".into()));
        }
        if self.base_width < 2 || self.base_width % 2 != 0 {
            return Err(Error::Config("autoencoder.base_width must be even and >= 2".into()));
        }
        Ok(())
    }
}

/// How pixels are weighted in the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionWeighting {
    /// Class-balanced `alpha`/`beta` weights computed per map.
    Balanced,
    /// Plain binary cross-entropy.
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weighting: ReconstructionWeighting,
    /// Balance weight `lambda` used by the balanced weighting.
    pub lambda: f64,
    /// Number of corpus maps used to fit the latent scale.
    pub scale_sample: usize,
    /// Side of the square tiles the augmented crops are cut into. Maps smaller
    /// than this are used whole.
    pub crop_size: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr_start: 2e-3,
            lr_end: 1e-4,
            weighting: ReconstructionWeighting::Uniform,
            lambda: 1.1,
            scale_sample: 64,
            crop_size: 32,
        }
    }
}

impl AeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("ae_training.epochs and batch_size must be positive".into()));
        }
        if !(self.lr_end <= self.lr_start && self.lr_end > 0.0) {
            return Err(Error::Config("ae_training: need 0 < lr_end <= lr_start".into()));
        }
        if self.crop_size == 0 || self.crop_size % 4 != 0 {
            return Err(Error::Config("ae_training.crop_size must be a positive multiple of 4".into()));
        }
        Ok(())
    }
}

/// Latent code of one edge map, `(C, H/4, W/4)`.
#[derive(Clone, Debug)]
pub struct LatentCode(Tensor);

impl LatentCode {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::invalid(format!(
                "latent code must be (C, h, w), got {:?}",
                t.dims()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }

    /// `(1, C, h, w)`.
    pub fn to_batch(&self) -> Result<Tensor> {
        Ok(self.0.unsqueeze(0)?)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv1: Conv2d,
    conv2: Conv2d,
    res1: ResBlock,
    res2: ResBlock,
    conv_out: Conv2d,
}

#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv2d,
    res1: ResBlock,
    res2: ResBlock,
    conv_expand: Conv2d,
    conv_half: Conv2d,
    conv_out: Conv2d,
}

/// Encoder/decoder pair plus the latent scale.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    encoder: Encoder,
    decoder: Decoder,
    normalization_scale: f64,
    config: AutoencoderConfig,
}

impl Autoencoder {
    /// Builds from `store` under the `ae` prefix. Freeze the store first to get
    /// an autoencoder whose weights never receive gradients.
    pub fn new(store: &mut VarStore, cfg: &AutoencoderConfig, normalization_scale: f64) -> Result<Self> {
        cfg.validate()?;
        if !(normalization_scale.is_finite() && normalization_scale > 0.0) {
            return Err(Error::invalid(format!(
                "normalization scale {normalization_scale} must be positive"
            )));
        }
        let w = cfg.base_width;
        let half = w / 2;
        let c = cfg.latent_channels;
        let mut s = store.scope("ae");
        let mut e = s.pp("encoder");
        let encoder = Encoder {
            conv1: Conv2d::new(&mut e.pp("conv1"), 4, half, 3, 1)?,
            conv2: Conv2d::new(&mut e.pp("conv2"), 4 * half, w, 3, 1)?,
            res1: ResBlock::new(&mut e.pp("res1"), w, w, None)?,
            res2: ResBlock::new(&mut e.pp("res2"), w, w, None)?,
            conv_out: Conv2d::new(&mut e.pp("conv_out"), w, c, 3, 1)?,
        };
        let mut d = s.pp("decoder");
        let decoder = Decoder {
            conv_in: Conv2d::new(&mut d.pp("conv_in"), c, w, 3, 1)?,
            res1: ResBlock::new(&mut d.pp("res1"), w, w, None)?,
            res2: ResBlock::new(&mut d.pp("res2"), w, w, None)?,
            conv_expand: Conv2d::new(&mut d.pp("conv_expand"), w, 4 * half, 3, 1)?,
            conv_half: Conv2d::new(&mut d.pp("conv_half"), half, half, 3, 1)?,
            conv_out: Conv2d::new(&mut d.pp("conv_out"), half, 4, 3, 1)?,
        };
        Ok(Self {
            encoder,
            decoder,
            normalization_scale,
            config: cfg.clone(),
        })
    }

    pub fn normalization_scale(&self) -> f64 {
        self.normalization_scale
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    /// `(B, 1, H, W) -> (B, C, H/4, W/4)`, scaled.
    pub fn encode_batch(&self, e: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = e.dims4()?;
        if c != 1 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "encoder expects (B, 1, H, W) with H, W divisible by 4, got {:?}",
                e.dims()
            )));
        }
        let enc = &self.encoder;
        let x = pixel_unshuffle(&((e * 2.0)? - 1.0)?, 2)?;
        let x = enc.conv1.forward(&x)?.silu()?;
        let x = enc.conv2.forward(&pixel_unshuffle(&x, 2)?)?;
        let x = enc.res2.forward(&enc.res1.forward(&x, None)?, None)?;
        let z = enc.conv_out.forward(&x.silu()?)?;
        Ok((z * self.normalization_scale)?)
    }

    /// `(B, C, h, w) -> (B, 1, 4h, 4w)` logits.
    pub fn decode_logits(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::invalid(format!(
                "decoder expects {} latent channels, got {c}",
                self.config.latent_channels
            )));
        }
        let dec = &self.decoder;
        let x = dec.conv_in.forward(&(z / self.normalization_scale)?)?;
        let x = dec.res2.forward(&dec.res1.forward(&x, None)?, None)?;
        let x = pixel_shuffle(&dec.conv_expand.forward(&x.silu()?)?, 2)?;
        let x = dec.conv_half.forward(&x.silu()?)?;
        let x = dec.conv_out.forward(&x.silu()?)?;
        pixel_shuffle(&x, 2)
    }

    /// `(B, C, h, w) -> (B, 1, 4h, 4w)` edge probabilities in `[0, 1]`.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        sigmoid(&self.decode_logits(z)?)
    }

    pub fn encode(&self, e: &EdgeMap) -> Result<LatentCode> {
        if e.height() % 4 != 0 || e.width() % 4 != 0 {
            return Err(Error::invalid(format!(
                "edge map {}x{} not divisible by 4",
                e.height(),
                e.width()
            )));
        }
        let z = self.encode_batch(&e.to_tensor(&Device::Cpu)?)?;
        LatentCode::new(z.squeeze(0)?)
    }

    pub fn decode(&self, z: &LatentCode) -> Result<EdgeMap> {
        EdgeMap::from_tensor(&self.decode_batch(&z.to_batch()?)?)
    }
}

/// Checkpoint file name of the autoencoder inside a run directory.
pub const AE_CHECKPOINT: &str = "ae.ckpt";

impl Autoencoder {
    /// Saves weights, config and latent scale.
    pub fn save(&self, store: &VarStore, path: &Path, epoch_losses: &[f64]) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "normalization_scale": self.normalization_scale,
            "epoch_losses": epoch_losses,
        });
        Checkpoint::new("autoencoder", meta, store.snapshot()).save(path)
    }

    /// Loads a frozen autoencoder.
    pub fn load(path: &Path, device: &Device) -> Result<(VarStore, Autoencoder)> {
        let ckpt = Checkpoint::load_kind(path, "autoencoder", device)?;
        let cfg: AutoencoderConfig = ckpt.meta_field("config", path)?;
        let scale: f64 = ckpt.meta_field("normalization_scale", path)?;
        let mut store = VarStore::from_tensors(ckpt.tensors, device)?;
        store.freeze();
        let ae = Autoencoder::new(&mut store, &cfg, scale)?;
        Ok((store, ae))
    }
}

/// Per-pixel reconstruction loss on decoder logits, averaged over pixels and
/// batch. `targets` may be soft.
pub fn reconstruction_loss(
    logits: &Tensor,
    targets: &Tensor,
    weighting: ReconstructionWeighting,
    lambda: f64,
) -> Result<Tensor> {
    let (b, _, h, w) = targets.dims4()?;
    let (pos_w, neg_w) = match weighting {
        ReconstructionWeighting::Uniform => (vec![1f32; b], vec![1f32; b]),
        ReconstructionWeighting::Balanced => {
            let flat = targets.flatten_from(1)?.to_vec2::<f32>()?;
            let mut pos = Vec::with_capacity(b);
            let mut neg = Vec::with_capacity(b);
            for row in &flat {
                let n_pos = row.iter().filter(|&&v| v > 0.0).count();
                let n_neg = row.len() - n_pos;
                let (alpha, beta) = class_balance(n_pos, n_neg, lambda);
                pos.push(beta as f32);
                neg.push(alpha as f32);
            }
            (pos, neg)
        }
    };
    let device = logits.device();
    let pos_w = Tensor::from_vec(pos_w, (b, 1, 1, 1), device)?;
    let neg_w = Tensor::from_vec(neg_w, (b, 1, 1, 1), device)?;
    // -log sigmoid(x) = softplus(-x), -log(1 - sigmoid(x)) = softplus(x)
    let pos_term = targets.broadcast_mul(&pos_w)?.mul(&softplus(&logits.neg()?)?)?;
    let neg_term = (1.0 - targets)?.broadcast_mul(&neg_w)?.mul(&softplus(logits)?)?;
    Ok(((pos_term + neg_term)?.sum_all()? / (b * h * w) as f64)?)
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let relu = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu + tail)?)
}

/// Ground-truth tiles for autoencoder training: one augmented crop per sample,
/// cut into non-overlapping `tile x tile` pieces in row-major order. Crop `i`
/// draws from stream `0x0ae0_0000 + i` of `seed`.
pub fn training_corpus(samples: &[Sample], policy: &AugmentationPolicy, tile: usize, seed: u64) -> Result<Vec<EdgeMap>> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut rng = random::generator(seed, 0x0ae0_0000 + i as u64);
        let gt = augment(s, policy, &mut rng)?.gt;
        let (h, w) = gt.dims();
        if h < tile || w < tile {
            out.push(gt);
            continue;
        }
        for y in (0..=h - tile).step_by(tile) {
            for x in (0..=w - tile).step_by(tile) {
                out.push(gt.crop(y, x, tile, tile));
            }
        }
    }
    Ok(out)
}

/// Outcome of [`train_autoencoder`].
pub struct TrainedAutoencoder {
    pub store: VarStore,
    pub autoencoder: Autoencoder,
    /// Mean reconstruction loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains the autoencoder on ground-truth edge maps, then fits the latent scale
/// to `1 / std` of the latents of a corpus sample. The returned store is frozen.
pub fn train_autoencoder(
    corpus: &[EdgeMap],
    cfg: &AutoencoderConfig,
    train: &AeTrainConfig,
    seed: u64,
    device: &Device,
) -> Result<TrainedAutoencoder> {
    if corpus.is_empty() {
        return Err(Error::invalid("autoencoder training needs a non-empty corpus"));
    }
    cfg.validate()?;
    train.validate()?;
    let dims = corpus[0].dims();
    if corpus.iter().any(|e| e.dims() != dims) {
        return Err(Error::invalid("autoencoder corpus maps must share dimensions"));
    }
    let mut store = VarStore::new(seed, device);
    let ae = Autoencoder::new(&mut store, cfg, 1.0)?;
    let mut opt = AdamW::new(&store, AdamWConfig::default());

    let per_epoch = corpus.len().div_ceil(train.batch_size);
    let total = train.epochs * per_epoch;
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        let mut rng = random::generator(seed, 1_000 + epoch as u64);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let maps: Vec<EdgeMap> = chunk
                .iter()
                .map(|&i| {
                    if rand::Rng::random::<bool>(&mut rng) {
                        crate::data::flip_horizontal(&corpus[i])
                    } else {
                        corpus[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&EdgeMap> = maps.iter().collect();
            let x = stack_edge_maps(&refs, device)?;
            let logits = ae.decode_logits(&ae.encode_batch(&x)?)?;
            let loss = reconstruction_loss(&logits, &x, train.weighting, train.lambda)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    ids: format!("{chunk:?}"),
                    breakdown: format!("reconstruction loss {value}"),
                });
            }
            sum += value;
            let grads = loss.backward()?;
            opt.step(&store, &grads, cosine_lr(step, total, train.lr_start, train.lr_end))?;
            step += 1;
        }
        let mean = sum / per_epoch as f64;
        log::info!("autoencoder epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }

    let sample: Vec<&EdgeMap> = corpus.iter().take(train.scale_sample.max(1)).collect();
    let std = latent_std(&ae, &sample, device)?;
    let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
    store.freeze();
    let autoencoder = Autoencoder::new(&mut store, cfg, scale)?;
    Ok(TrainedAutoencoder {
        store,
        autoencoder,
        epoch_losses,
    })
}

/// Standard deviation of all latent entries of `maps` under `ae`.
pub fn latent_std(ae: &Autoencoder, maps: &[&EdgeMap], device: &Device) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    let mut n = 0usize;
    for chunk in maps.chunks(16) {
        let z = ae.encode_batch(&stack_edge_maps(chunk, device)?)?.detach();
        let v = z.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        n += v.len();
        sum += v.iter().sum::<f64>();
        sq += v.iter().map(|x| x * x).sum::<f64>();
    }
    if n == 0 {
        return Err(Error::invalid("latent_std needs at least one map"));
    }
    let mean = sum / n as f64;
    Ok((sq / n as f64 - mean * mean).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AutoencoderConfig {
        AutoencoderConfig {
            latent_channels: 4,
            base_width: 8,
        }
    }

    #[test]
    fn shapes_follow_four_x_compression() {
        let mut vs = VarStore::new(0, &Device::Cpu);
        let ae = Autoencoder::new(&mut vs, &tiny(), 1.0).unwrap();
        let e = EdgeMap::zeros(32, 48);
        let z = ae.encode(&e).unwrap();
        assert_eq!(z.dims(), (4, 8, 12));
        let d = ae.decode(&z).unwrap();
        assert_eq!(d.dims(), (32, 48));
        assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ae.encode(&EdgeMap::zeros(30, 32)).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let mut vs = VarStore::new(0, &Device::Cpu);
        let ae = Autoencoder::new(&mut vs, &tiny(), 1.0).unwrap();
        let e = EdgeMap::from_fn(16, 16, |y, x| if y == x { 1.0 } else { 0.0 });
        let a = ae.encode(&e).unwrap().tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = ae.encode(&e).unwrap().tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_range_on_random_latents() {
        let mut vs = VarStore::new(1, &Device::Cpu);
        let ae = Autoencoder::new(&mut vs, &tiny(), 1.0).unwrap();
        let z = random::standard_normal(&[2, 4, 5, 5], &mut random::generator(1, 0), &Device::Cpu).unwrap();
        let z = (z * 50.0).unwrap();
        let d = ae.decode_batch(&z).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let r = train_autoencoder(&[], &tiny(), &AeTrainConfig::default(), 0, &Device::Cpu);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-100f32, 0.0, 100.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(y[0] >= 0.0 && y[0] < 1e-30);
        assert!((y[1] - 2f32.ln()).abs() < 1e-6);
        assert_eq!(y[2], 100.0);
    }
}
