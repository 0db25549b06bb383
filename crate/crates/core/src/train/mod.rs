//! Second-stage training: the denoiser learns on latents of a frozen
//! autoencoder.
//!
//! Every step draws its batch, augmentations, times and noise from a generator
//! seeded with `(seed, step)`. Together with checkpointed optimizer moments and
//! EMA shadow, this makes a resumed run bit-identical to an uninterrupted one.

mod optim;

pub use optim::{cosine_lr, AdamW, AdamWConfig, Ema};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{augment, Sample};
use crate::denoiser::{Denoiser, LatentGeometry};
use crate::diffusion::{make_training_targets, predicted_z0, Denoise};
use crate::error::{Error, Result};
use crate::maps::{stack_edge_maps, stack_images};
use crate::nn::VarStore;
use crate::objective::{combined_loss, DecoderPath, LossBreakdown};
use crate::random;

pub const LOG_FILE: &str = "train_log.csv";
const LOG_HEADER: &str = "step,lr,f_loss,n_loss,wce_loss,total";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema_warmup: u64,
    pub seed: u64,
    /// Checkpoint period in steps; the final step is always saved.
    pub checkpoint_every: usize,
    pub decoder_path: DecoderPath,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 5000,
            lr_start: 5e-5,
            lr_end: 5e-6,
            weight_decay: 1e-4,
            ema_decay: 0.999,
            ema_warmup: 200,
            seed: 0,
            checkpoint_every: 1000,
            decoder_path: DecoderPath::Distilled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("train.batch_size and train.iterations must be positive".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::Config("train: need 0 < lr_end <= lr_start".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("train.ema_decay must lie in (0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(step, self.iterations, self.lr_start, self.lr_end)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepLog {
    fn csv(&self) -> String {
        format!(
            "{},{:e},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.step, self.lr, self.loss.f_loss, self.loss.n_loss, self.loss.wce_loss, self.loss.total
        )
    }
}

pub fn net_checkpoint_path(run: &Path, step: usize) -> PathBuf {
    run.join(format!("net_{step}.ckpt"))
}

pub fn ema_checkpoint_path(run: &Path, step: usize) -> PathBuf {
    run.join(format!("net_ema_{step}.ckpt"))
}

/// Highest step with both a raw and an EMA checkpoint in `run`.
pub fn latest_step(run: &Path) -> Option<usize> {
    let entries = fs::read_dir(run).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().to_string_lossy().into_owned();
            let step = name.strip_prefix("net_")?.strip_suffix(".ckpt")?.parse().ok()?;
            ema_checkpoint_path(run, step).is_file().then_some(step)
        })
        .max()
}

/// Denoiser weights plus optimizer and EMA state.
pub struct DiffusionTrainer<'a> {
    cfg: Config,
    ae: &'a Autoencoder,
    samples: &'a [Sample],
    store: VarStore,
    net: Denoiser,
    opt: AdamW,
    ema: Ema,
    step: usize,
    device: Device,
}

impl<'a> DiffusionTrainer<'a> {
    /// Fresh network initialized from `cfg.train.seed`.
    pub fn new(cfg: &Config, ae: &'a Autoencoder, samples: &'a [Sample], device: &Device) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::invalid("diffusion training needs at least one sample"));
        }
        let mut store = VarStore::new(cfg.train.seed, device);
        let net = Denoiser::new(&mut store, &cfg.denoiser, geometry(cfg, ae)?)?;
        Ok(Self::assemble(cfg, ae, samples, store, net, device))
    }

    fn assemble(
        cfg: &Config,
        ae: &'a Autoencoder,
        samples: &'a [Sample],
        store: VarStore,
        net: Denoiser,
        device: &Device,
    ) -> Self {
        let opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: cfg.train.weight_decay,
                ..Default::default()
            },
        );
        let ema = Ema::new(&store, cfg.train.ema_decay, cfg.train.ema_warmup);
        Self {
            cfg: cfg.clone(),
            ae,
            samples,
            store,
            net,
            opt,
            ema,
            step: 0,
            device: device.clone(),
        }
    }

    /// Continues from the checkpoints of `step` in `run`.
    pub fn resume(
        cfg: &Config,
        ae: &'a Autoencoder,
        samples: &'a [Sample],
        run: &Path,
        step: usize,
        device: &Device,
    ) -> Result<Self> {
        let raw = Checkpoint::load_kind(&net_checkpoint_path(run, step), "denoiser-train", device)?;
        let ema = Checkpoint::load_kind(&ema_checkpoint_path(run, step), "denoiser", device)?;
        let mut store = VarStore::from_tensors(raw.with_prefix("param."), device)?;
        let net = Denoiser::new(&mut store, &cfg.denoiser, geometry(cfg, ae)?)?;
        let mut t = Self::assemble(cfg, ae, samples, store, net, device);
        let opt_steps: u64 = raw.meta_field("optimizer_steps", &net_checkpoint_path(run, step))?;
        t.opt.load_state(opt_steps, &raw.with_prefix("optim."))?;
        let updates: u64 = ema.meta_field("ema_updates", &ema_checkpoint_path(run, step))?;
        t.ema.restore(updates, ema.tensors)?;
        t.step = step;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn net(&self) -> &Denoiser {
        &self.net
    }

    pub fn ema(&self) -> &Ema {
        &self.ema
    }

    /// Loss of one batch for the current weights, without updating them.
    pub fn batch_loss(&self, step: usize) -> Result<(Tensor, Vec<LossBreakdown>, Vec<String>)> {
        let tc = &self.cfg.train;
        let mut rng = random::generator(tc.seed, 0x7a11_0000_0000 + step as u64);
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            let i = rng.random_range(0..self.samples.len());
            batch.push(augment(&self.samples[i], &self.cfg.augmentation, &mut rng)?);
        }
        let ids: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();
        let gts: Vec<_> = batch.iter().map(|s| &s.gt).collect();
        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let gt = stack_edge_maps(&gts, &self.device)?;
        let image = stack_images(&images, &self.device)?;

        let z0 = self.ae.encode_batch(&gt)?.detach();
        let targets = make_training_targets(&z0, self.cfg.diffusion.t_min, &mut rng)?;
        let cond = self.net.encode_condition(&image)?;
        let out = self.net.denoise(&targets.z_t, &targets.t, &cond)?;
        let z0_pred = predicted_z0(&targets.z_t, &targets.t, &out)?;
        let loss = combined_loss(
            &out,
            &targets.f_target,
            &targets.n_target,
            &z0_pred,
            &gt,
            &targets.t,
            self.ae,
            &self.cfg.wce,
            tc.decoder_path,
        )?;
        Ok((loss.total, loss.items, ids))
    }

    /// One optimizer step.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let (total, items, ids) = self.batch_loss(step)?;
        let mean = LossBreakdown::mean(&items);
        let value = total.to_scalar::<f32>()?;
        if !value.is_finite() || items.iter().any(|b| !b.total.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                ids: ids.join(","),
                breakdown: serde_json::to_string(&items).unwrap_or_default(),
            });
        }
        let grads = total.backward()?;
        let lr = self.cfg.train.lr_at(step);
        self.opt.step(&self.store, &grads, lr)?;
        self.ema.update(&self.store)?;
        self.step += 1;
        Ok(StepLog { step, lr, loss: mean })
    }

    fn meta(&self) -> serde_json::Value {
        let g = self.net.geometry();
        serde_json::json!({
            "config": self.cfg,
            "step": self.step,
            "geometry": [g.channels, g.height, g.width],
            "optimizer_steps": self.opt.steps(),
            "ema_updates": self.ema.updates(),
        })
    }

    /// Writes `net_{step}.ckpt` (weights + optimizer) and `net_ema_{step}.ckpt`.
    pub fn save(&self, run: &Path) -> Result<()> {
        let mut tensors = std::collections::BTreeMap::new();
        for (k, t) in self.store.snapshot() {
            tensors.insert(format!("param.{k}"), t);
        }
        for (k, t) in self.opt.state() {
            tensors.insert(format!("optim.{k}"), t);
        }
        Checkpoint::new("denoiser-train", self.meta(), tensors).save(&net_checkpoint_path(run, self.step))?;
        Checkpoint::new("denoiser", self.meta(), self.ema.shadow().clone())
            .save(&ema_checkpoint_path(run, self.step))
    }

    /// Trains up to `cfg.train.iterations`, appending to the CSV log and
    /// checkpointing into `run` when given. On a non-finite loss the batch
    /// diagnostics are written to `run/nonfinite_loss.json` before returning
    /// the error.
    pub fn run(&mut self, run: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut log_file = match run {
            Some(dir) => Some(open_log(dir, self.step)?),
            None => None,
        };
        let mut logs = Vec::new();
        let every = self.cfg.train.checkpoint_every;
        while self.step < self.cfg.train.iterations {
            let entry = match self.train_step() {
                Ok(e) => e,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    if let (Some(dir), Error::NonFiniteLoss { step, ids, breakdown }) = (run, &e) {
                        let dump = format!(
                            "{{\"step\": {step}, \"ids\": {:?}, \"breakdown\": {breakdown}}}\n",
                            ids
                        );
                        let _ = fs::write(dir.join("nonfinite_loss.json"), dump);
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some((path, f)) = log_file.as_mut() {
                writeln!(f, "{}", entry.csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_step(&entry);
            logs.push(entry);
            if let Some(dir) = run {
                if self.step % every == 0 || self.step == self.cfg.train.iterations {
                    if let Some((path, f)) = log_file.as_mut() {
                        f.flush().map_err(|e| Error::io(path.as_path(), e))?;
                    }
                    self.save(dir)?;
                }
            }
        }
        Ok(logs)
    }
}

fn geometry(cfg: &Config, ae: &Autoencoder) -> Result<LatentGeometry> {
    LatentGeometry::for_crop(ae.latent_channels(), cfg.augmentation.crop_size)
}

/// Opens the CSV log for appending, dropping rows at or after `from_step`.
fn open_log(dir: &Path, from_step: usize) -> Result<(PathBuf, std::io::BufWriter<fs::File>)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let mut kept = vec![LOG_HEADER.to_string()];
    if from_step > 0 {
        if let Ok(f) = fs::File::open(&path) {
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < from_step) {
                    kept.push(line);
                }
            }
        }
    }
    let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok((path, f))
}

/// Reads a training log back into rows.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            if v.len() != 6 {
                return Err(Error::invalid(format!("{}: malformed row `{line}`", path.display())));
            }
            Ok(StepLog {
                step: v[0] as usize,
                lr: v[1],
                loss: LossBreakdown {
                    f_loss: v[2],
                    n_loss: v[3],
                    wce_loss: v[4],
                    sigma_t: 0.0,
                    total: v[5],
                },
            })
        })
        .collect()
}

/// Loads a denoiser for inference from a `net_ema_*` or `net_*` checkpoint.
pub fn load_denoiser(path: &Path, device: &Device) -> Result<(Config, VarStore, Denoiser)> {
    let ckpt = Checkpoint::load(path, device)?;
    let tensors = match ckpt.kind.as_str() {
        "denoiser" => ckpt.tensors.clone(),
        "denoiser-train" => ckpt.with_prefix("param."),
        other => {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("expected a denoiser checkpoint, found {other}"),
            })
        }
    };
    let cfg: Config = ckpt.meta_field("config", path)?;
    let [c, h, w]: [usize; 3] = ckpt.meta_field("geometry", path)?;
    let mut store = VarStore::from_tensors(tensors, device)?;
    store.freeze();
    let net = Denoiser::new(
        &mut store,
        &cfg.denoiser,
        LatentGeometry {
            channels: c,
            height: h,
            width: w,
        },
    )?;
    Ok((cfg, store, net))
}
