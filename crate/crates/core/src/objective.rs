//! Training objective: weighted cross-entropy with an ignore band, the
//! decoder-skipping decode used to supervise latent predictions in image space,
//! and the combined per-sample loss.

use candle_core::{CpuStorage, CustomOp2, Device, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::diffusion::{per_item, DenoiserOutput};
use crate::error::{Error, Result};
use crate::maps::EdgeMap;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WceConfig {
    pub lambda: f64,
    pub eta: f64,
}

impl Default for WceConfig {
    fn default() -> Self {
        Self { lambda: 1.1, eta: 0.3 }
    }
}

impl WceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("wce.lambda = {} must be > 0", self.lambda)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("wce.eta = {} must lie in (0, 1)", self.eta)));
        }
        Ok(())
    }
}

/// `(alpha, beta)` for `n_pos` edge and `n_neg` non-edge pixels:
/// `alpha = lambda n_pos / (n_pos + n_neg)`, `beta = n_neg / (n_pos + n_neg)`.
pub fn class_balance(n_pos: usize, n_neg: usize, lambda: f64) -> (f64, f64) {
    let total = (n_pos + n_neg) as f64;
    if total == 0.0 {
        return (0.0, 0.0);
    }
    (lambda * n_pos as f64 / total, n_neg as f64 / total)
}

/// Per-pixel `(edge weight, non-edge weight)` for one ground truth, plus the
/// number of supervised pixels. Ignore-band pixels get `(0, 0)`.
fn pixel_weights(gt: &[f32], cfg: &WceConfig) -> (Vec<f32>, Vec<f32>, usize) {
    let eta = cfg.eta as f32;
    let n_pos = gt.iter().filter(|&&g| g >= eta).count();
    let n_neg = gt.iter().filter(|&&g| g == 0.0).count();
    let (alpha, beta) = class_balance(n_pos, n_neg, cfg.lambda);
    let mut pos = vec![0f32; gt.len()];
    let mut neg = vec![0f32; gt.len()];
    for (i, &g) in gt.iter().enumerate() {
        if g >= eta {
            pos[i] = beta as f32;
        } else if g == 0.0 {
            neg[i] = alpha as f32;
        }
    }
    (pos, neg, n_pos + n_neg)
}

fn check_gt_range(gt: &[f32]) -> Result<()> {
    if let Some(g) = gt.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::invalid(format!("ground-truth value {g} outside [0, 1]")));
    }
    Ok(())
}

/// Weighted cross-entropy of one prediction, summed over pixels.
pub fn wce_loss(pred: &EdgeMap, gt: &EdgeMap, cfg: &WceConfig) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.height(), gt.width()],
            actual: vec![pred.height(), pred.width()],
        });
    }
    check_gt_range(gt.data())?;
    let (pos, neg, _) = pixel_weights(gt.data(), cfg);
    let mut loss = 0.0;
    for (i, &p) in pred.data().iter().enumerate() {
        let p = (p as f64).clamp(EPS, 1.0 - EPS);
        if pos[i] > 0.0 {
            loss += pos[i] as f64 * -p.ln();
        }
        if neg[i] > 0.0 {
            loss += neg[i] as f64 * -(1.0 - p).ln();
        }
    }
    Ok(loss)
}

/// Per-pixel weight tensors for a `(B, 1, H, W)` ground truth plus the
/// per-item supervised pixel counts.
fn weight_tensors(gt: &Tensor, cfg: &WceConfig, device: &Device) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let (b, _, _, _) = gt.dims4()?;
    let rows = gt.detach().flatten_from(1)?.to_vec2::<f32>()?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut counts = Vec::with_capacity(b);
    for row in &rows {
        check_gt_range(row)?;
        let (p, n, c) = pixel_weights(row, cfg);
        pos.extend(p);
        neg.extend(n);
        counts.push(c);
    }
    let pos = Tensor::from_vec(pos, gt.shape(), device)?;
    let neg = Tensor::from_vec(neg, gt.shape(), device)?;
    Ok((pos, neg, counts))
}

fn check_dims(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            expected: gt.dims().to_vec(),
            actual: pred.dims().to_vec(),
        });
    }
    Ok(())
}

/// Batched weighted cross-entropy on `(B, 1, H, W)` tensors.
///
/// Returns the per-item pixel sums `(B,)` and the per-item supervised pixel
/// counts. `gt` is treated as a constant.
pub fn wce_loss_tensor(pred: &Tensor, gt: &Tensor, cfg: &WceConfig) -> Result<(Tensor, Vec<usize>)> {
    check_dims(pred, gt)?;
    let (pos, neg, counts) = weight_tensors(gt, cfg, pred.device())?;
    let p = pred.clamp(EPS as f32, (1.0 - EPS) as f32)?;
    let edge = pos.mul(&p.log()?.neg()?)?;
    let background = neg.mul(&(1.0 - &p)?.log()?.neg()?)?;
    let per_item = (edge + background)?.flatten_from(1)?.sum(1)?;
    Ok((per_item, counts))
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// [`wce_loss_tensor`] of `sigmoid(logits)`, in the stable form
/// `w+ softplus(-x) + w- softplus(x)` with no probability clamp.
pub fn wce_loss_logits_tensor(logits: &Tensor, gt: &Tensor, cfg: &WceConfig) -> Result<(Tensor, Vec<usize>)> {
    check_dims(logits, gt)?;
    let (pos, neg, counts) = weight_tensors(gt, cfg, logits.device())?;
    let edge = pos.mul(&softplus(&logits.neg()?)?)?;
    let background = neg.mul(&softplus(logits)?)?;
    let per_item = (edge + background)?.flatten_from(1)?.sum(1)?;
    Ok((per_item, counts))
}

/// Passes the decoder logits forward unchanged; routes the gradient to `z`
/// through the pool-and-replicate surrogate.
struct StraightThrough;

impl CustomOp2 for StraightThrough {
    fn name(&self) -> &'static str {
        "distilled-decode"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        _s2: &CpuStorage,
        _l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let data = s1.as_slice::<f32>()?;
        let Some((start, end)) = l1.contiguous_offsets() else {
            candle_core::bail!("distilled-decode expects a contiguous decoded map")
        };
        Ok((CpuStorage::F32(data[start..end].to_vec()), l1.shape().clone()))
    }

    fn bwd(
        &self,
        _decoded: &Tensor,
        z: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, c, _, _) = z.dims4()?;
        let g = distillation_surrogate(grad_res, c).map_err(candle_core::Error::wrap)?;
        Ok((None, Some(g)))
    }
}

/// Fixed linear stand-in for the decoder Jacobian transpose: a `(B, 1, 4h, 4w)`
/// logit-map gradient is averaged over each 4x4 cell and spread evenly over `c`
/// latent channels, giving a `(B, c, h, w)` latent gradient.
pub fn distillation_surrogate(grad_image: &Tensor, c: usize) -> Result<Tensor> {
    let (b, one, hh, ww) = grad_image.dims4()?;
    if one != 1 || hh % 4 != 0 || ww % 4 != 0 {
        return Err(Error::invalid(format!(
            "surrogate expects (B, 1, 4h, 4w), got {:?}",
            grad_image.dims()
        )));
    }
    let (h, w) = (hh / 4, ww / 4);
    let pooled = grad_image
        .contiguous()?
        .reshape((b, 1, h, 4, w, 4))?
        .mean(5)?
        .mean(3)?;
    Ok((pooled / c as f64)?.broadcast_as((b, c, h, w))?.contiguous()?)
}

/// Decoder logits of `z0_pred`, exact in the forward pass, with the decoder
/// skipped in the backward pass. The output sigmoid stays outside, in the loss
/// ([`wce_loss_logits_tensor`]), so its derivative is kept exactly. See
/// [`distillation_surrogate`].
pub fn distilled_decode(z0_pred: &Tensor, ae: &Autoencoder) -> Result<Tensor> {
    let logits = ae.decode_logits(&z0_pred.detach())?.detach().contiguous()?;
    Ok(logits.apply_op2(z0_pred, StraightThrough)?)
}

/// Decoder logits with the gradient taken through the decoder. Used as the
/// memory baseline for [`distilled_decode`].
pub fn full_decode(z0_pred: &Tensor, ae: &Autoencoder) -> Result<Tensor> {
    ae.decode_logits(z0_pred)
}

/// How the image-space loss reaches the latent prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderPath {
    #[default]
    Distilled,
    Full,
}

/// Time-dependent weight of the image-space term, `(1 - t)^2`.
pub fn sigma_t(t: f64) -> f64 {
    (1.0 - t) * (1.0 - t)
}

/// Per-sample loss values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub f_loss: f64,
    pub n_loss: f64,
    pub wce_loss: f64,
    pub sigma_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Mean over samples, field by field.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            f_loss: sum(|b| b.f_loss),
            n_loss: sum(|b| b.n_loss),
            wce_loss: sum(|b| b.wce_loss),
            sigma_t: sum(|b| b.sigma_t),
            total: sum(|b| b.total),
        }
    }
}

/// Batch loss: differentiable mean of the per-sample totals, plus breakdowns.
pub struct CombinedLoss {
    pub total: Tensor,
    pub items: Vec<LossBreakdown>,
}

/// `|f - f*|^2 + |n - n*|^2 + sigma_t WCE(decode(z0_pred), gt)` per sample.
///
/// Squared errors are element means; the WCE sum is divided by the number of
/// supervised pixels of that sample.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    out: &DenoiserOutput,
    f_target: &Tensor,
    n_target: &Tensor,
    z0_pred: &Tensor,
    gt: &Tensor,
    ts: &[f64],
    ae: &Autoencoder,
    cfg: &WceConfig,
    path: DecoderPath,
) -> Result<CombinedLoss> {
    if let Some(t) = ts.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::invalid(format!("time {t} outside (0, 1]")));
    }
    let b = f_target.dims()[0];
    let sq_mean = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        Ok((a - b)?.sqr()?.flatten_from(1)?.mean(1)?)
    };
    let f_loss = sq_mean(&out.f_pred, f_target)?;
    let n_loss = sq_mean(&out.n_pred, n_target)?;
    let decoded = match path {
        DecoderPath::Distilled => distilled_decode(z0_pred, ae)?,
        DecoderPath::Full => full_decode(z0_pred, ae)?,
    };
    let (wce_sum, counts) = wce_loss_logits_tensor(&decoded, gt, cfg)?;
    let norm: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let wce = wce_sum.mul(&per_item(&norm, &wce_sum)?)?;
    let sigmas: Vec<f64> = if ts.len() == 1 {
        vec![sigma_t(ts[0]); b]
    } else {
        ts.iter().map(|&t| sigma_t(t)).collect()
    };
    let weighted = wce.mul(&per_item(&sigmas, &wce)?)?;
    let per_sample = ((&f_loss + &n_loss)? + weighted)?;
    let total = per_sample.mean_all()?;

    let fv = f_loss.to_vec1::<f32>()?;
    let nv = n_loss.to_vec1::<f32>()?;
    let wv = wce.to_vec1::<f32>()?;
    let items = (0..b)
        .map(|i| {
            let (f, n, w, s) = (fv[i] as f64, nv[i] as f64, wv[i] as f64, sigmas[i]);
            LossBreakdown {
                f_loss: f,
                n_loss: n,
                wce_loss: w,
                sigma_t: s,
                total: f + n + s * w,
            }
        })
        .collect();
    Ok(CombinedLoss { total, items })
}
