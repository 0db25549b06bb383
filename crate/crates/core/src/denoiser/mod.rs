//! Conditional denoising U-Net with decoupled `(f, n)` heads.
//!
//! Layout for a latent of size `h x w` (image `4h x 4w`):
//!
//! ```text
//! image -> space-to-depth(4) -> stem -> c0 (h)   -> down -> c1 (h/2) -> down -> c2 (h/4)
//! [z_t | c0] -> in -> res0 ----------------------------------------------> skip0
//!                      down -> [. | c1] -> res1 ------------------------> skip1
//!                              down -> [. | c2] -> res2 -> mid (+ filter*)
//!                              up -> [. | skip1] -> up_res1
//!                      up -> [. | skip0] -> up_res0 -> FFT filter -> f head, n head
//! ```
//!
//! Every residual block also receives the sinusoidal time embedding.
//! (*) the bottleneck filter is only present with
//! [`FilterPlacement::HeadAndBottleneck`].

mod fft_filter;

pub use fft_filter::{adaptive_fft_filter, is_self_conjugate_bin, AdaptiveFftFilter, FilterWeights};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{per_item, Denoise, DenoiserOutput};
use crate::error::{Error, Result};
use crate::nn::{pixel_unshuffle, upsample_nearest2x, Conv2d, GroupNorm, Linear, ResBlock, Scope, VarStore};

/// Where adaptive FFT filters are inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterPlacement {
    /// Trunk feature right before the head split.
    #[default]
    Head,
    /// Head plus the bottleneck feature.
    HeadAndBottleneck,
    /// No filter (ablation).
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Channels at latent resolution.
    pub base_width: usize,
    /// Channels at 1/2 and 1/4 latent resolution.
    pub deep_width: usize,
    /// Channels of every condition-pyramid level.
    pub cond_width: usize,
    pub time_dim: usize,
    pub filter_placement: FilterPlacement,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            deep_width: 48,
            cond_width: 32,
            time_dim: 64,
            filter_placement: FilterPlacement::Head,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.deep_width == 0 || self.cond_width == 0 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("denoiser.time_dim must be even and >= 2".into()));
        }
        Ok(())
    }
}

/// Latent tensor geometry `(channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentGeometry {
    /// Geometry for images of `crop x crop` pixels.
    pub fn for_crop(channels: usize, crop: usize) -> Result<Self> {
        if crop % 16 != 0 {
            return Err(Error::Config(format!(
                "crop size {crop} must be divisible by 16 (4x autoencoder, two U-Net stages)"
            )));
        }
        Ok(Self {
            channels,
            height: crop / 4,
            width: crop / 4,
        })
    }

    pub fn batch_dims(&self, b: usize) -> [usize; 4] {
        [b, self.channels, self.height, self.width]
    }
}

/// Multi-resolution image features at latent, 1/2 and 1/4 latent resolution.
#[derive(Clone, Debug)]
pub struct ConditionFeatures {
    pub levels: Vec<Tensor>,
}

impl ConditionFeatures {
    /// Selects batch items `[start, start + len)` of every level.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            levels: self
                .levels
                .iter()
                .map(|l| l.narrow(0, start, len))
                .collect::<candle_core::Result<_>>()?,
        })
    }

    /// Repeats a single-item pyramid `b` times along the batch dimension.
    pub fn repeat(&self, b: usize) -> Result<Self> {
        Ok(Self {
            levels: self
                .levels
                .iter()
                .map(|l| l.repeat((b, 1, 1, 1)))
                .collect::<candle_core::Result<_>>()?,
        })
    }
}

/// Small convolutional pyramid trained from scratch.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    stem: Conv2d,
    block0: ResBlock,
    down1: Conv2d,
    block1: ResBlock,
    down2: Conv2d,
}

impl ConditionEncoder {
    pub fn new(s: &mut Scope, width: usize) -> Result<Self> {
        Ok(Self {
            stem: Conv2d::new(&mut s.pp("stem"), 48, width, 3, 1)?,
            block0: ResBlock::new(&mut s.pp("block0"), width, width, None)?,
            down1: Conv2d::new(&mut s.pp("down1"), width, width, 3, 2)?,
            block1: ResBlock::new(&mut s.pp("block1"), width, width, None)?,
            down2: Conv2d::new(&mut s.pp("down2"), width, width, 3, 2)?,
        })
    }

    /// `image: (B, 3, H, W)` with `H, W` divisible by 16.
    pub fn forward(&self, image: &Tensor) -> Result<ConditionFeatures> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::invalid(format!("condition image has {c} channels, expected 3")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "condition image {h}x{w} not divisible by 4"
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid(format!(
                "condition image {h}x{w} not divisible by 16 (two pyramid stages)"
            )));
        }
        // centre pixel values around zero
        let x = pixel_unshuffle(&(image - 0.5)?, 4)?;
        let c0 = self.block0.forward(&self.stem.forward(&x)?, None)?;
        let c1 = self.block1.forward(&self.down1.forward(&c0.silu()?)?, None)?;
        let c2 = self.down2.forward(&c1.silu()?)?;
        Ok(ConditionFeatures {
            levels: vec![c0, c1, c2],
        })
    }
}

/// Sinusoidal features of `t` followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    freqs: Vec<f64>,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        let half = dim / 2;
        let freqs = (0..half)
            .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        Ok(Self {
            freqs,
            lin1: Linear::new(&mut s.pp("lin1"), dim, dim)?,
            lin2: Linear::new(&mut s.pp("lin2"), dim, dim)?,
        })
    }

    /// Raw sinusoidal features, `(B, dim)`.
    pub fn features(&self, ts: &[f64], device: &Device) -> Result<Tensor> {
        let half = self.freqs.len();
        let mut data = Vec::with_capacity(ts.len() * half * 2);
        for &t in ts {
            let x = t * 1000.0;
            data.extend(self.freqs.iter().map(|f| (x * f).sin() as f32));
            data.extend(self.freqs.iter().map(|f| (x * f).cos() as f32));
        }
        Ok(Tensor::from_vec(data, (ts.len(), 2 * half), device)?)
    }

    pub fn forward(&self, ts: &[f64], device: &Device) -> Result<Tensor> {
        let x = self.features(ts, device)?;
        self.lin2.forward(&self.lin1.forward(&x)?.silu()?)
    }
}

#[derive(Clone, Debug)]
struct UNet {
    time: TimeEmbedding,
    conv_in: Conv2d,
    res0: ResBlock,
    down1: Conv2d,
    res1: ResBlock,
    down2: Conv2d,
    res2: ResBlock,
    mid: ResBlock,
    mid_filter: Option<AdaptiveFftFilter>,
    up1: Conv2d,
    up_res1: ResBlock,
    up0: Conv2d,
    up_res0: ResBlock,
    filter: Option<AdaptiveFftFilter>,
    head_norm: GroupNorm,
    head_f: Conv2d,
    head_n: Conv2d,
}

impl UNet {
    fn new(s: &mut Scope, cfg: &DenoiserConfig, g: LatentGeometry) -> Result<Self> {
        let (w0, w1, cw, td) = (cfg.base_width, cfg.deep_width, cfg.cond_width, cfg.time_dim);
        let c = g.channels;
        let t = Some(td);
        let head_filter = matches!(
            cfg.filter_placement,
            FilterPlacement::Head | FilterPlacement::HeadAndBottleneck
        );
        Ok(Self {
            time: TimeEmbedding::new(&mut s.pp("time"), td)?,
            conv_in: Conv2d::new(&mut s.pp("conv_in"), c + cw, w0, 3, 1)?,
            res0: ResBlock::normed(&mut s.pp("res0"), w0, w0, t)?,
            down1: Conv2d::new(&mut s.pp("down1"), w0, w1, 3, 2)?,
            res1: ResBlock::normed(&mut s.pp("res1"), w1 + cw, w1, t)?,
            down2: Conv2d::new(&mut s.pp("down2"), w1, w1, 3, 2)?,
            res2: ResBlock::normed(&mut s.pp("res2"), w1 + cw, w1, t)?,
            mid: ResBlock::normed(&mut s.pp("mid"), w1, w1, t)?,
            mid_filter: if cfg.filter_placement == FilterPlacement::HeadAndBottleneck {
                Some(AdaptiveFftFilter::new(
                    &mut s.pp("mid_filter"),
                    w1,
                    g.height / 4,
                    g.width / 4,
                )?)
            } else {
                None
            },
            up1: Conv2d::new(&mut s.pp("up1"), w1, w1, 3, 1)?,
            up_res1: ResBlock::normed(&mut s.pp("up_res1"), 2 * w1, w1, t)?,
            up0: Conv2d::new(&mut s.pp("up0"), w1, w0, 3, 1)?,
            up_res0: ResBlock::normed(&mut s.pp("up_res0"), 2 * w0, w0, t)?,
            filter: if head_filter {
                Some(AdaptiveFftFilter::new(&mut s.pp("filter"), w0, g.height, g.width)?)
            } else {
                None
            },
            head_norm: GroupNorm::new(&mut s.pp("head_norm"), w0)?,
            head_f: Conv2d::new(&mut s.pp("head_f"), w0, c, 3, 1)?,
            head_n: Conv2d::new(&mut s.pp("head_n"), w0, c, 3, 1)?,
        })
    }

    fn forward(&self, z: &Tensor, ts: &[f64], cond: &ConditionFeatures) -> Result<DenoiserOutput> {
        let b = z.dim(0)?;
        let ts: Vec<f64> = if ts.len() == 1 { vec![ts[0]; b] } else { ts.to_vec() };
        let temb = self.time.forward(&ts, z.device())?;
        let temb = Some(&temb);
        let [c0, c1, c2] = match cond.levels.as_slice() {
            [a, b, c] => [a, b, c],
            _ => return Err(Error::invalid("condition pyramid must have 3 levels")),
        };

        let h = self.conv_in.forward(&Tensor::cat(&[z, c0], 1)?)?;
        let skip0 = self.res0.forward(&h, temb)?;
        let h = self.down1.forward(&skip0.silu()?)?;
        let skip1 = self.res1.forward(&Tensor::cat(&[&h, c1], 1)?, temb)?;
        let h = self.down2.forward(&skip1.silu()?)?;
        let h = self.res2.forward(&Tensor::cat(&[&h, c2], 1)?, temb)?;
        let mut h = self.mid.forward(&h, temb)?;
        if let Some(f) = &self.mid_filter {
            h = f.forward(&h)?;
        }
        let h = self.up1.forward(&upsample_nearest2x(&h.silu()?)?)?;
        let h = self.up_res1.forward(&Tensor::cat(&[&h, &skip1], 1)?, temb)?;
        let h = self.up0.forward(&upsample_nearest2x(&h.silu()?)?)?;
        let mut trunk = self.up_res0.forward(&Tensor::cat(&[&h, &skip0], 1)?, temb)?;
        if let Some(f) = &self.filter {
            trunk = f.forward(&trunk)?;
        }
        let trunk = self.head_norm.forward(&trunk)?.silu()?;
        Ok(DenoiserOutput {
            f_pred: self.head_f.forward(&trunk)?,
            n_pred: self.head_n.forward(&trunk)?,
        })
    }
}

/// Condition encoder plus U-Net.
#[derive(Clone, Debug)]
pub struct Denoiser {
    cond: ConditionEncoder,
    unet: UNet,
    geometry: LatentGeometry,
}

impl Denoiser {
    /// Builds the network from `store` under the `net` prefix, creating any
    /// missing parameter from the store's seeded generator.
    pub fn new(store: &mut VarStore, cfg: &DenoiserConfig, geometry: LatentGeometry) -> Result<Self> {
        cfg.validate()?;
        if geometry.height % 4 != 0 || geometry.width % 4 != 0 {
            return Err(Error::invalid(format!(
                "latent {}x{} must be divisible by 4",
                geometry.height, geometry.width
            )));
        }
        let mut s = store.scope("net");
        Ok(Self {
            cond: ConditionEncoder::new(&mut s.pp("cond"), cfg.cond_width)?,
            unet: UNet::new(&mut s.pp("unet"), cfg, geometry)?,
            geometry,
        })
    }

    pub fn geometry(&self) -> LatentGeometry {
        self.geometry
    }

    /// Image `(B, 3, H, W)` to feature pyramid.
    pub fn encode_condition(&self, image: &Tensor) -> Result<ConditionFeatures> {
        self.cond.forward(image)
    }

    pub fn head_filter(&self) -> Option<&AdaptiveFftFilter> {
        self.unet.filter.as_ref()
    }
}

impl Denoise for Denoiser {
    type Condition = ConditionFeatures;

    fn denoise(&self, z_t: &Tensor, t: &[f64], cond: &ConditionFeatures) -> Result<DenoiserOutput> {
        let (b, c, h, w) = z_t.dims4()?;
        let g = self.geometry;
        if (c, h, w) != (g.channels, g.height, g.width) {
            return Err(Error::ShapeMismatch {
                expected: g.batch_dims(b).to_vec(),
                actual: z_t.dims().to_vec(),
            });
        }
        // validates the time vector length against the batch
        per_item(t, z_t)?;
        self.unet.forward(z_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random;

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            base_width: 8,
            deep_width: 8,
            cond_width: 8,
            time_dim: 8,
            filter_placement: FilterPlacement::Head,
        }
    }

    fn image(seed: u64, b: usize, size: usize) -> Tensor {
        let t = random::uniform(&[b, 3, size, size], 0.5, &mut random::generator(seed, 0), &Device::Cpu).unwrap();
        (t + 0.5).unwrap()
    }

    #[test]
    fn output_shapes_match_latent() {
        let g = LatentGeometry::for_crop(4, 32).unwrap();
        let mut vs = VarStore::new(0, &Device::Cpu);
        let net = Denoiser::new(&mut vs, &small_cfg(), g).unwrap();
        let cond = net.encode_condition(&image(1, 2, 32)).unwrap();
        assert_eq!(cond.levels[0].dims(), &[2, 8, 8, 8]);
        assert_eq!(cond.levels[1].dims(), &[2, 8, 4, 4]);
        assert_eq!(cond.levels[2].dims(), &[2, 8, 2, 2]);
        let z = random::standard_normal(&g.batch_dims(2), &mut random::generator(2, 0), &Device::Cpu).unwrap();
        let out = net.denoise(&z, &[0.3, 0.9], &cond).unwrap();
        assert_eq!(out.f_pred.dims(), z.dims());
        assert_eq!(out.n_pred.dims(), z.dims());
    }

    #[test]
    fn rejects_wrong_geometry() {
        let g = LatentGeometry::for_crop(4, 32).unwrap();
        let mut vs = VarStore::new(0, &Device::Cpu);
        let net = Denoiser::new(&mut vs, &small_cfg(), g).unwrap();
        let cond = net.encode_condition(&image(1, 1, 32)).unwrap();
        let z = Tensor::zeros((1, 4, 4, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(net.denoise(&z, &[0.5], &cond).is_err());
        assert!(net.encode_condition(&image(1, 1, 30)).is_err());
    }

    #[test]
    fn condition_changes_output() {
        let g = LatentGeometry::for_crop(4, 32).unwrap();
        let mut vs = VarStore::new(0, &Device::Cpu);
        let net = Denoiser::new(&mut vs, &small_cfg(), g).unwrap();
        let z = random::standard_normal(&g.batch_dims(1), &mut random::generator(2, 0), &Device::Cpu).unwrap();
        let a = net.denoise(&z, &[0.5], &net.encode_condition(&image(1, 1, 32)).unwrap()).unwrap();
        let b = net.denoise(&z, &[0.5], &net.encode_condition(&image(2, 1, 32)).unwrap()).unwrap();
        let d = (a.f_pred - b.f_pred).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn condition_encoder_is_finite_on_black_image() {
        let mut vs = VarStore::new(0, &Device::Cpu);
        let enc = ConditionEncoder::new(&mut vs.scope("c"), 8).unwrap();
        let zero = Tensor::zeros((1, 3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        let f = enc.forward(&zero).unwrap();
        for l in &f.levels {
            let v = l.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let again = enc.forward(&zero).unwrap();
        let d = (&f.levels[2] - &again.levels[2]).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn zero_filter_is_transparent() {
        let g = LatentGeometry::for_crop(4, 32).unwrap();
        let with = small_cfg();
        let without = DenoiserConfig {
            filter_placement: FilterPlacement::None,
            ..small_cfg()
        };
        let mut vs_a = VarStore::new(4, &Device::Cpu);
        let a = Denoiser::new(&mut vs_a, &with, g).unwrap();
        // reuse every non-filter parameter
        let mut vs_b = VarStore::from_tensors(
            vs_a.snapshot()
                .into_iter()
                .filter(|(k, _)| !k.contains("filter"))
                .collect(),
            &Device::Cpu,
        )
        .unwrap();
        let b = Denoiser::new(&mut vs_b, &without, g).unwrap();
        let img = image(3, 1, 32);
        let z = random::standard_normal(&g.batch_dims(1), &mut random::generator(5, 0), &Device::Cpu).unwrap();
        let oa = a.denoise(&z, &[0.4], &a.encode_condition(&img).unwrap()).unwrap();
        let ob = b.denoise(&z, &[0.4], &b.encode_condition(&img).unwrap()).unwrap();
        let d = (oa.n_pred - ob.n_pred).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5, "{d}");
    }
}
