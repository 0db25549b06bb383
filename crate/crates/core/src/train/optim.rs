//! AdamW, weight EMA and the learning-rate schedule.
//!
//! Both the optimizer moments and the EMA shadow are plain tensor maps so that
//! they can be written into checkpoints and restored exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::VarStore;

/// Cosine decay from `start` (step 0) to `end` (step `total`); steps past
/// `total` are clamped.
pub fn cosine_lr(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    let phase = step.min(total) as f64 / total as f64;
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    cfg: AdamWConfig,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(store: &VarStore, cfg: AdamWConfig) -> Self {
        let zeros = |t: &Tensor| t.zeros_like().expect("zeros_like on a parameter");
        let m: BTreeMap<_, _> = store
            .vars()
            .iter()
            .map(|(k, v)| (k.clone(), zeros(v.as_tensor())))
            .collect();
        Self {
            cfg,
            steps: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, store: &VarStore, grads: &GradStore, lr: f64) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::invalid("optimizer step on a frozen store"));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = self
                .m
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no optimizer state for {name}")))?;
            let v = &self.v[name];
            let m = ((m * b1)? + (g * (1.0 - b1))?)?;
            let v = ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&v / c2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&m / c1)? / denom)?;
            let w = var.as_tensor();
            let w = ((w * (1.0 - lr * self.cfg.weight_decay))? - (update * lr)?)?;
            var.set(&w)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moments as a flat tensor map (`m.<name>`, `v.<name>`).
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, steps: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, map) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (k, t) in map.iter_mut() {
                let saved = state
                    .get(&format!("{prefix}.{k}"))
                    .ok_or_else(|| Error::invalid(format!("optimizer state lacks {prefix}.{k}")))?;
                if saved.dims() != t.dims() {
                    return Err(Error::ShapeMismatch {
                        expected: t.dims().to_vec(),
                        actual: saved.dims().to_vec(),
                    });
                }
                *t = saved.clone();
            }
        }
        self.steps = steps;
        Ok(())
    }
}

/// Exponential moving average of a store's parameters.
///
/// During the first `warmup` updates the shadow simply copies the weights.
pub struct Ema {
    decay: f64,
    warmup: u64,
    updates: u64,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(store: &VarStore, decay: f64, warmup: u64) -> Self {
        Self {
            decay,
            warmup,
            updates: 0,
            shadow: store.snapshot(),
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn update(&mut self, store: &VarStore) -> Result<()> {
        self.updates += 1;
        let copy = self.updates <= self.warmup;
        for (name, var) in store.vars() {
            let w = var.as_tensor().detach();
            let next = if copy {
                w.copy()?
            } else {
                let s = &self.shadow[name];
                ((s * self.decay)? + (w * (1.0 - self.decay))?)?
            };
            self.shadow.insert(name.clone(), next);
        }
        Ok(())
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }

    pub fn restore(&mut self, updates: u64, shadow: BTreeMap<String, Tensor>) -> Result<()> {
        if shadow.len() != self.shadow.len() || shadow.keys().ne(self.shadow.keys()) {
            return Err(Error::invalid("EMA shadow does not match the parameter set"));
        }
        self.shadow = shadow;
        self.updates = updates;
        Ok(())
    }
}
