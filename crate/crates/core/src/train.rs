//! Run configuration, the training loop, and checkpoints.
//!
//! Every random draw in a step is derived from `(seed, stream, step, ...)`, so
//! a run is a pure function of its config and a resumed run replays the
//! uninterrupted one exactly.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::XutConfig;
use crate::checkpoint::TensorFile;
use crate::datapipe::{stack_images, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, Conditioning, SamplerConfig, TimeSampling};
use crate::optim::{AdamW, OptimizerConfig};
use crate::pipeline::TextToImage;
use crate::routing::{batch_route_masks, TRAINING_ROUTE_RATE};
use crate::seed::{self, stream};
use crate::textcond::{TextConfig, Tokenizer};

const CHECKPOINT_FORMAT: &str = "xut-checkpoint-1";

fn default_tread_rate() -> f64 {
    TRAINING_ROUTE_RATE
}

fn default_caption_dropout() -> f64 {
    0.1
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: u64,
    pub batch: usize,
    #[serde(default = "default_tread_rate")]
    pub tread_rate: f64,
    #[serde(default = "default_caption_dropout")]
    pub caption_dropout: f64,
    #[serde(default = "one")]
    pub grad_accum: usize,
    #[serde(default)]
    pub time_sampling: TimeSampling,
    /// Steps between checkpoints; the final step is always saved.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: XutConfig,
    #[serde(default)]
    pub text: Option<TextConfig>,
    pub data: DatasetSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampling: Option<SamplerConfig>,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl RunConfig {
    /// Toy backbone on procedural 32x32 scenes.
    pub fn toy(steps: u64, seed: u64) -> Self {
        let mut optimizer = OptimizerConfig::adamw(1e-3);
        optimizer.grad_clip = Some(1.0);
        optimizer.warmup_steps = 100;
        Self {
            model: XutConfig::toy(),
            text: None,
            data: DatasetSpec::procedural(seed, 32),
            optimizer,
            schedule: ScheduleConfig {
                steps,
                batch: 4,
                tread_rate: TRAINING_ROUTE_RATE,
                caption_dropout: default_caption_dropout(),
                grad_accum: 1,
                time_sampling: TimeSampling::Uniform,
                checkpoint_every: None,
            },
            sampling: None,
            seed,
            precision: Precision::F32,
        }
    }

    /// Micro backbone on 8x8 scenes; fast enough for bitwise replay tests.
    pub fn micro(steps: u64, seed: u64) -> Self {
        let mut cfg = Self::toy(steps, seed);
        cfg.model = XutConfig::micro();
        cfg.data = DatasetSpec::procedural(seed, 8);
        cfg.schedule.batch = 2;
        cfg.optimizer.warmup_steps = 0;
        cfg
    }

    pub fn text_config(&self) -> TextConfig {
        self.text
            .clone()
            .unwrap_or_else(|| TextConfig::for_context_dim(self.model.context_dim))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.text_config().validate()?;
        self.data.validate(self.model.patch_size)?;
        self.optimizer.validate()?;
        let s = &self.schedule;
        if s.batch == 0 || s.grad_accum == 0 {
            return Err(Error::InvalidConfig("batch and grad_accum must be positive".into()));
        }
        if !(0.0..1.0).contains(&s.tread_rate) {
            return Err(Error::InvalidRate(s.tread_rate));
        }
        if !(0.0..=1.0).contains(&s.caption_dropout) {
            return Err(Error::InvalidConfig("caption_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// TOML or JSON, chosen by extension (JSON also accepted as a fallback).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text)?
        } else {
            match toml::from_str(&text) {
                Ok(c) => c,
                Err(e) => serde_json::from_str(&text)
                    .map_err(|_| Error::InvalidConfig(format!("{}: {e}", path.display())))?,
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub seconds: f64,
    /// Image tokens entering the model per second.
    pub tokens_per_sec: f64,
    /// Image tokens each routed block actually processes, summed over the batch.
    pub routed_block_tokens: usize,
    /// Image tokens through routed blocks per second, counting every block.
    pub routed_tokens_per_sec: f64,
}

pub struct Trainer {
    cfg: RunConfig,
    model: TextToImage,
    opt: AdamW,
    data: Dataset,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = TextToImage::new(&cfg.model, &cfg.text_config(), cfg.precision.dtype(), cfg.seed)?;
        let opt = AdamW::new(model.store.vars(), &cfg.optimizer, cfg.model.model_dim)?;
        let data = Dataset::new(&cfg.data, cfg.model.patch_size, Tokenizer::default())?;
        Ok(Self {
            cfg,
            model,
            opt,
            data,
            step: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TextToImage {
        &self.model
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Runs one optimizer step (with gradient accumulation).
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let s = &self.cfg.schedule;
        let (batch, accum, rate) = (s.batch, s.grad_accum, s.tread_rate);
        let seed = self.cfg.seed;
        let dtype = self.model.dtype();
        let step = self.step;
        let size = self.cfg.data.train_size;
        let n_img = self.cfg.model.image_tokens(size, size);
        let n_routed_blocks = (self.cfg.model.n_enc + self.cfg.model.n_dec) * self.cfg.model.n_depth;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.model.store.vars().len()];
        let mut loss_sum = 0.0;
        let mut kept_tokens = 0;
        for micro in 0..accum {
            let base = (step * accum as u64 + micro as u64) * batch as u64;
            let samples = (0..batch as u64)
                .map(|i| self.data.sample(base + i))
                .collect::<Result<Vec<_>>>()?;
            let dropped: Vec<bool> = (0..batch as u64)
                .map(|i| seed::rng(seed, &[stream::DROPOUT, base + i]).random::<f64>() < s.caption_dropout)
                .collect();
            let captions: Vec<Vec<u32>> = samples.iter().map(|c| c.tokens.clone()).collect();
            let x0 = stack_images(&samples.iter().map(|c| c.image.clone()).collect::<Vec<_>>(), dtype)?;
            let cond = Conditioning {
                positions: samples.iter().map(|c| c.pos.clone()).collect(),
                text: self.model.encode_captions(&captions, &dropped)?,
            };
            let masks = if rate > 0.0 {
                let route_seed = seed::derive(seed, &[stream::ROUTE, step, micro as u64]);
                Some(batch_route_masks(n_img, rate, route_seed, batch)?)
            } else {
                None
            };
            kept_tokens += masks.as_ref().map_or(n_img * batch, |m| m.iter().map(|m| m.kept().len()).sum());
            let mut rng = seed::rng(seed, &[stream::NOISE, step, micro as u64]);
            let (loss, _) = fm_loss(
                &self.model,
                &x0,
                &cond,
                masks.as_deref(),
                s.time_sampling,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::TrainingDivergence { loss, .. } => Error::TrainingDivergence { step: step + 1, loss },
                e => e,
            })?;
            loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let scaled = if accum > 1 { (loss / accum as f64)? } else { loss };
            let g = scaled.backward()?;
            for (acc, var) in grads.iter_mut().zip(self.model.store.vars().values()) {
                if let Some(gv) = g.get(var) {
                    *acc = Some(match acc.take() {
                        Some(a) => (a + gv)?,
                        None => gv.clone(),
                    });
                }
            }
        }
        let lr = self.opt.learning_rate();
        let grad_norm = self.opt.step_with(&grads).map_err(|e| match e {
            Error::TrainingDivergence { loss, .. } => Error::TrainingDivergence { step: step + 1, loss },
            e => e,
        })?;
        self.step += 1;
        let seconds = start.elapsed().as_secs_f64();
        let routed_block_tokens = kept_tokens / accum;
        Ok(StepMetrics {
            step: self.step,
            loss: loss_sum / accum as f64,
            grad_norm,
            lr,
            seconds,
            tokens_per_sec: (n_img * batch * accum) as f64 / seconds,
            routed_block_tokens,
            routed_tokens_per_sec: (n_img * batch * accum * n_routed_blocks) as f64 / seconds,
        })
    }

    /// Trains until `steps` total, writing JSON-lines metrics and checkpoints
    /// into `out_dir`. Returns the metrics of the steps run.
    pub fn run(&mut self, out_dir: &Path, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        std::fs::create_dir_all(out_dir)?;
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("metrics.jsonl"))?;
        let mut all = Vec::new();
        while self.step < self.cfg.schedule.steps {
            let m = self.train_step()?;
            writeln!(log, "{}", serde_json::to_string(&m)?)?;
            on_step(&m);
            let every = self.cfg.schedule.checkpoint_every;
            if every.is_some_and(|e| e > 0 && self.step.is_multiple_of(e)) || self.step == self.cfg.schedule.steps {
                self.save(&checkpoint_path(out_dir, self.step))?;
            }
            all.push(m);
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new(serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "step": self.step,
            "config": serde_json::to_value(&self.cfg)?,
            // All draws are keyed by (seed, step), so this is the full RNG state.
            "rng": { "seed": self.cfg.seed, "step": self.step },
        }));
        for (name, var) in self.model.store.vars() {
            f.insert(format!("param.{name}"), var.as_tensor().clone());
        }
        for (name, t) in self.opt.state() {
            f.insert(format!("opt.{name}"), t);
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.write(path)
    }

    pub fn from_checkpoint(file: &TensorFile) -> Result<Self> {
        let (cfg, step) = checkpoint_header(file)?;
        let mut t = Self::new(cfg)?;
        t.model.store.load(&prefixed(file, "param.")?)?;
        t.opt.load_state(&prefixed(file, "opt.")?, step)?;
        t.step = step;
        Ok(t)
    }

    /// Resumes and overrides the step budget.
    pub fn resume(path: &Path, steps: Option<u64>) -> Result<Self> {
        let mut t = Self::from_checkpoint(&TensorFile::read(path)?)?;
        if let Some(s) = steps {
            t.cfg.schedule.steps = s;
        }
        Ok(t)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

fn prefixed(file: &TensorFile, prefix: &str) -> Result<std::collections::BTreeMap<String, Tensor>> {
    Ok(file
        .tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
        .collect())
}

pub fn checkpoint_header(file: &TensorFile) -> Result<(RunConfig, u64)> {
    if file.meta.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Integrity("not a training checkpoint".into()));
    }
    let cfg: RunConfig = serde_json::from_value(
        file.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Integrity("checkpoint has no config".into()))?,
    )
    .map_err(|e| Error::Integrity(format!("checkpoint config: {e}")))?;
    let step = file
        .meta
        .get("step")
        .and_then(|s| s.as_u64())
        .ok_or_else(|| Error::Integrity("checkpoint has no step".into()))?;
    Ok((cfg, step))
}

/// Model weights from a checkpoint, for sampling.
pub fn load_model(file: &TensorFile) -> Result<(TextToImage, RunConfig, u64)> {
    let (cfg, step) = checkpoint_header(file)?;
    let model = TextToImage::new(&cfg.model, &cfg.text_config(), cfg.precision.dtype(), cfg.seed)?;
    model.store.load(&prefixed(file, "param.")?)?;
    Ok((model, cfg, step))
}
