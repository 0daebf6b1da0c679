//! AdamW with decoupled weight decay and checkpointable moments.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_betas() -> [f64; 2] {
    [0.9, 0.95]
}

fn default_eps() -> f64 {
    1e-8
}

fn default_base_dim() -> usize {
    1
}

fn default_min_lr_ratio() -> f64 {
    0.1
}

fn default_kind() -> String {
    "adamw".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Scale the learning rate by `base_dim / model_dim`.
    #[serde(default)]
    pub mu_p_scaling: bool,
    #[serde(default = "default_base_dim")]
    pub base_dim: usize,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Linear warmup length in steps.
    #[serde(default)]
    pub warmup_steps: u64,
    /// Cosine decay after warmup, reaching `min_lr_ratio * lr` at this step.
    #[serde(default)]
    pub decay_steps: Option<u64>,
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        Self {
            kind: default_kind(),
            lr,
            betas: default_betas(),
            weight_decay: 0.0,
            eps: default_eps(),
            mu_p_scaling: false,
            base_dim: default_base_dim(),
            grad_clip: None,
            warmup_steps: 0,
            decay_steps: None,
            min_lr_ratio: default_min_lr_ratio(),
        }
    }

    pub fn effective_lr(&self, model_dim: usize) -> f64 {
        if self.mu_p_scaling {
            self.lr * self.base_dim as f64 / model_dim as f64
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != "adamw" {
            return Err(Error::InvalidConfig(format!("unknown optimizer `{}`", self.kind)));
        }
        let [b1, b2] = self.betas;
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("optimizer lr, betas or eps out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::InvalidConfig("min_lr_ratio must lie in [0, 1]".into()));
        }
        if self.weight_decay < 0.0 || self.base_dim == 0 {
            return Err(Error::InvalidConfig("negative weight decay or zero base_dim".into()));
        }
        Ok(())
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
    decay: bool,
}

pub struct AdamW {
    cfg: OptimizerConfig,
    lr: f64,
    slots: Vec<Slot>,
    step: u64,
}

impl AdamW {
    /// Matrices get weight decay; vectors (biases, norms, gains) do not.
    pub fn new(vars: &BTreeMap<String, Var>, cfg: &OptimizerConfig, model_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let slots = vars
            .iter()
            .map(|(name, var)| {
                Ok(Slot {
                    name: name.clone(),
                    var: var.clone(),
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                    decay: var.rank() >= 2,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            lr: cfg.effective_lr(model_dim),
            slots,
            step: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        let w = self.cfg.warmup_steps;
        if w > 0 && self.step < w {
            return self.lr * (self.step + 1) as f64 / w as f64;
        }
        match self.cfg.decay_steps {
            Some(total) if total > w => {
                let p = ((self.step - w) as f64 / (total - w) as f64).min(1.0);
                let floor = self.cfg.min_lr_ratio;
                self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
            }
            _ => self.lr,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters without a gradient are treated as
    /// having a zero gradient. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let gs: Vec<Option<Tensor>> = self.slots.iter().map(|s| grads.get(&s.var).cloned()).collect();
        self.step_with(&gs)
    }

    pub fn step_with(&mut self, grads: &[Option<Tensor>]) -> Result<f64> {
        if grads.len() != self.slots.len() {
            return Err(Error::Internal("gradient count does not match parameters".into()));
        }
        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::TrainingDivergence { step: self.step, loss: norm });
        }
        let clip = match self.cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.learning_rate();
        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (slot, g) in self.slots.iter_mut().zip(grads) {
            let g = match g {
                Some(g) if clip != 1.0 => (g * clip)?,
                Some(g) => g.clone(),
                None => slot.var.zeros_like()?,
            };
            slot.m = ((&slot.m * b1)? + (&g * (1.0 - b1))?)?;
            slot.v = ((&slot.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let mhat = (&slot.m / bc1)?;
            let denom = ((&slot.v / bc2)?.sqrt()? + self.cfg.eps)?;
            let mut update = (mhat / denom)?;
            let theta = slot.var.as_tensor();
            if slot.decay && self.cfg.weight_decay > 0.0 {
                update = (update + (theta * self.cfg.weight_decay)?)?;
            }
            slot.var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(norm)
    }

    /// Moments keyed `m.<param>` and `v.<param>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for s in &self.slots {
            out.insert(format!("m.{}", s.name), s.m.clone());
            out.insert(format!("v.{}", s.name), s.v.clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for s in &mut self.slots {
            for (key, dst) in [("m", &mut s.m), ("v", &mut s.v)] {
                let name = format!("{key}.{}", s.name);
                let t = state
                    .get(&name)
                    .ok_or_else(|| Error::Integrity(format!("optimizer state missing {name}")))?;
                if t.dims() != s.var.dims() {
                    return Err(Error::Integrity(format!("optimizer state {name} has shape {:?}", t.dims())));
                }
                *dst = t.to_dtype(s.var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
