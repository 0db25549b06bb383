use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use super::conv::conv2d;
use crate::error::{Error, Result};
use crate::random::{self, Generator};

/// Parameter initializer.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-b, b]`.
    Uniform(f32),
}

/// Named parameter store.
pub struct VarStore {
    vars: BTreeMap<String, Var>,
    rng: Generator,
    device: Device,
    frozen: bool,
}

impl VarStore {
    /// Empty store; missing parameters are initialized from `seed`.
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: random::generator(seed, 0x5eed),
            device: device.clone(),
            frozen: false,
        }
    }

    /// Store pre-populated with `tensors` (e.g. loaded from a checkpoint).
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, device: &Device) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_device(device)?)?);
        }
        Ok(Self {
            vars,
            rng: random::generator(0, 0x5eed),
            device: device.clone(),
            frozen: false,
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// After freezing, layers built from this store hold detached weights.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copy of every parameter (later updates do not alias it).
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor().detach().copy().expect("copy of a cpu tensor");
                (k.clone(), t)
            })
            .collect()
    }

    /// Overwrites parameter values in place; every name must already exist.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in tensors {
            let var = self
                .vars
                .get(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::ShapeMismatch {
                    expected: var.dims().to_vec(),
                    actual: t.dims().to_vec(),
                });
            }
            var.set(t)?;
        }
        Ok(())
    }

    fn get(&mut self, name: String, dims: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(&name) {
            if var.dims() != dims {
                return Err(Error::ShapeMismatch {
                    expected: dims.to_vec(),
                    actual: var.dims().to_vec(),
                });
            }
        } else {
            if self.frozen {
                return Err(Error::invalid(format!(
                    "parameter {name} missing from a frozen store"
                )));
            }
            let t = match init {
                Init::Zeros => Tensor::zeros(dims, DType::F32, &self.device)?,
                Init::Ones => Tensor::ones(dims, DType::F32, &self.device)?,
                Init::Uniform(b) => random::uniform(dims, b, &mut self.rng, &self.device)?,
            };
            self.vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        let var = &self.vars[&name];
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }
}

/// Name prefix into a [`VarStore`].
pub struct Scope<'a> {
    store: &'a mut VarStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: format!("{}.{}", self.prefix, name),
            store: &mut *self.store,
        }
    }

    pub fn get(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(format!("{}.{}", self.prefix, name), dims, init)
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

/// 2D convolution with bias. Default init follows the usual `1/sqrt(fan_in)` bound.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        s: &mut Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f32).sqrt();
        Ok(Self {
            weight: s.get("weight", &[c_out, c_in, kernel, kernel], Init::Uniform(bound))?,
            bias: s.get("bias", &[c_out], Init::Uniform(bound))?,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(s: &mut Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f32).sqrt();
        Ok(Self {
            weight: s.get("weight", &[d_out, d_in], Init::Uniform(bound))?,
            bias: s.get("bias", &[d_out], Init::Uniform(bound))?,
        })
    }

    /// `x: (B, d_in) -> (B, d_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization with a per-channel affine map.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    /// Uses the largest of 8, 4, 2, 1 groups that divides `channels`.
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        let groups = [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1);
        Ok(Self {
            groups,
            gamma: s.get("gamma", &[channels], Init::Ones)?,
            beta: s.get("beta", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Pre-activation residual block with an optional additive time embedding.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time: Option<Linear>,
    skip: Option<Conv2d>,
    norms: Option<(GroupNorm, GroupNorm)>,
}

impl ResBlock {
    pub fn new(s: &mut Scope, c_in: usize, c_out: usize, time_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut s.pp("conv1"), c_in, c_out, 3, 1)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), c_out, c_out, 3, 1)?,
            time: match time_dim {
                Some(d) => Some(Linear::new(&mut s.pp("time"), d, c_out)?),
                None => None,
            },
            skip: if c_in != c_out {
                Some(Conv2d::new(&mut s.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
            norms: None,
        })
    }

    /// Same block with a group norm in front of each activation.
    pub fn normed(s: &mut Scope, c_in: usize, c_out: usize, time_dim: Option<usize>) -> Result<Self> {
        let mut block = Self::new(s, c_in, c_out, time_dim)?;
        block.norms = Some((GroupNorm::new(&mut s.pp("norm1"), c_in)?, GroupNorm::new(&mut s.pp("norm2"), c_out)?));
        Ok(block)
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let pre1 = match &self.norms {
            Some((n1, _)) => n1.forward(x)?,
            None => x.clone(),
        };
        let mut h = self.conv1.forward(&pre1.silu()?)?;
        if let (Some(time), Some(temb)) = (&self.time, temb) {
            let (b, c) = (h.dim(0)?, h.dim(1)?);
            let t = time.forward(&temb.silu()?)?.reshape((b, c, 1, 1))?;
            h = h.broadcast_add(&t)?;
        }
        if let Some((_, n2)) = &self.norms {
            h = n2.forward(&h)?;
        }
        let h = self.conv2.forward(&h.silu()?)?;
        let x = match &self.skip {
            Some(skip) => skip.forward(x)?,
            None => x.clone(),
        };
        Ok((x + h)?)
    }
}

/// `(B, C, H, W) -> (B, C*r*r, H/r, W/r)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::invalid(format!(
            "pixel_unshuffle: {h}x{w} not divisible by {r}"
        )));
    }
    Ok(x
        .reshape((b * c, h / r, r, w / r, r))?
        .permute((0, 2, 4, 1, 3))?
        .contiguous()?
        .reshape((b, c * r * r, h / r, w / r))?)
}

/// `(B, C*r*r, H, W) -> (B, C, H*r, W*r)`; inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, crr, h, w) = x.dims4()?;
    if crr % (r * r) != 0 {
        return Err(Error::invalid(format!(
            "pixel_shuffle: {crr} channels not divisible by {}",
            r * r
        )));
    }
    let c = crr / (r * r);
    Ok(x
        .reshape((b * c, r, r, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .contiguous()?
        .reshape((b, c, h * r, w * r))?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b * c, h, 1, w, 1))?
        .broadcast_as((b * c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Logistic function written via `tanh`, which saturates without overflow.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}
