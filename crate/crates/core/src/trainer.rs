//! Adapter finetuning: Adam with a linear-warmup constant schedule and
//! gradient accumulation over micro-steps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;

/// Data order seed is `seed + DATA_SEED_OFFSET`.
pub const DATA_SEED_OFFSET: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub grad_accum_steps: usize,
    pub per_device_batch: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// 0 disables intermediate checkpoints; the final step is always saved
    /// when an output directory is given.
    pub checkpoint_every: usize,
    /// Global-norm clip applied to the averaged gradient; off when `None`.
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            warmup_steps: 20,
            grad_accum_steps: 16,
            per_device_batch: 1,
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be at least 1"));
        }
        if self.grad_accum_steps == 0 || self.per_device_batch == 0 {
            return Err(Error::config("grad_accum_steps and per_device_batch must be at least 1"));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!("learning rate {} is invalid", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("Adam hyperparameters out of range"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }

    pub fn global_batch(&self) -> usize {
        self.per_device_batch * self.grad_accum_steps
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("lr", self.base_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("grad_accum_steps", self.grad_accum_steps.to_string()),
            ("per_device_batch", self.per_device_batch.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("adam_beta1", self.beta1.to_string()),
            ("adam_beta2", self.beta2.to_string()),
            ("adam_eps", self.eps.to_string()),
        ];
        if let Some(c) = self.grad_clip {
            v.push(("grad_clip", c.to_string()));
        }
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("cannot parse {k}={v}")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "lr" => self.base_lr = parse(k, v)?,
                "warmup_steps" => self.warmup_steps = parse(k, v)?,
                "grad_accum_steps" => self.grad_accum_steps = parse(k, v)?,
                "per_device_batch" => self.per_device_batch = parse(k, v)?,
                "max_steps" => self.max_steps = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
                "adam_beta1" => self.beta1 = parse(k, v)?,
                "adam_beta2" => self.beta2 = parse(k, v)?,
                "adam_eps" => self.eps = parse(k, v)?,
                "grad_clip" => {
                    self.grad_clip = match v.trim() {
                        "" | "none" | "off" => None,
                        s => Some(parse(k, s)?),
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// `base_lr · min(1, (step + 1) / warmup_steps)`.
pub fn lr_at_step(step: usize, config: &TrainConfig) -> f64 {
    let w = config.warmup_steps.max(1) as f64;
    config.base_lr * ((step as f64 + 1.0) / w).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state plus the micro-step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    config: TrainConfig,
    step: usize,
    micro: usize,
    micro_losses: Vec<f64>,
    micro_tokens: usize,
    moments: Vec<Moments>,
}

/// Result of one [`Trainer::train_step`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroStep {
    pub loss: f64,
    /// Set when this micro-step completed an optimizer update.
    pub update: Option<UpdateRecord>,
}

/// One optimizer step as it appears in the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean loss over the micro-steps of this update.
    pub loss: f64,
    pub tokens_seen: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            micro: 0,
            micro_losses: Vec::new(),
            micro_tokens: 0,
            moments: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Optimizer updates applied so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Runs forward and backward on `batch` and accumulates adapter
    /// gradients. Every `grad_accum_steps` calls the averaged gradient is
    /// applied and the accumulators are cleared.
    pub fn train_step(&mut self, model: &mut Model, batch: &[Sample], tokens_before: usize) -> Result<MicroStep> {
        if batch.len() != self.config.per_device_batch {
            return Err(Error::Contract(format!(
                "batch of {} samples, per_device_batch is {}",
                batch.len(),
                self.config.per_device_batch
            )));
        }
        let pattern = model.config().train_pattern();
        let scale = 1.0 / self.config.global_batch() as f32;
        let mut loss = 0.0;
        for s in batch {
            let l = model
                .accumulate_gradients(&s.tokens, &s.mask, pattern.clamp_to(s.tokens.len()), scale)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("step {} micro {}: {m}", self.step, self.micro)),
                    other => other,
                })?;
            loss += l;
            self.micro_tokens += s.tokens.len();
        }
        loss /= batch.len() as f64;
        self.micro_losses.push(loss);
        self.micro += 1;
        if self.micro < self.config.grad_accum_steps {
            return Ok(MicroStep { loss, update: None });
        }
        let lr = lr_at_step(self.step, &self.config);
        self.apply_update(model, lr)?;
        let record = UpdateRecord {
            step: self.step,
            lr,
            loss: self.micro_losses.iter().sum::<f64>() / self.micro_losses.len() as f64,
            tokens_seen: tokens_before + self.micro_tokens,
        };
        self.step += 1;
        self.micro = 0;
        self.micro_losses.clear();
        self.micro_tokens = 0;
        Ok(MicroStep {
            loss,
            update: Some(record),
        })
    }

    /// Adam update of every adapter factor from its accumulated gradient,
    /// which then is cleared.
    fn apply_update(&mut self, model: &mut Model, lr: f64) -> Result<()> {
        let mut params: Vec<&mut crate::tensor::Tensor> = model
            .adapters_mut()
            .flat_map(|a| {
                let (a, b) = a.factors_mut();
                [a, b]
            })
            .collect();
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        }
        let grads: Vec<Vec<f32>> = params
            .iter()
            .map(|p| p.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        let clip = match self.config.grad_clip {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .map(|&g| (g as f64) * (g as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    (c / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = (self.step + 1) as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.config.eps as f32);
        for ((p, g), mom) in params.iter_mut().zip(&grads).zip(&mut self.moments) {
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i] * clip;
                mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * gi;
                mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * gi * gi;
                let denom = mom.v[i].sqrt() / bc2_sqrt + eps;
                data[i] -= step_size * mom.m[i] / denom;
            }
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite adapter value after step {}", self.step)));
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<UpdateRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingLog {
    /// Tab-separated `step lr loss tokens_seen`, one line per optimizer step.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tlr\tloss\ttokens_seen\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.step, e.lr, e.loss, e.tokens_seen);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.lqlr"))
}

/// Runs `config.max_steps` optimizer steps over `dataset`, cycling through
/// it in a fresh seeded order each epoch. `on_step(model, k)` is called
/// before training with `k = 0` and after the k-th update. With `out_dir`,
/// checkpoints go to `out_dir/checkpoints` and the log to `out_dir/train_log.tsv`.
pub fn train_loop(
    model: &mut Model,
    dataset: &[Sample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&Model, usize) -> Result<()>,
) -> Result<TrainingLog> {
    if dataset.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let ckpt_dir = match out_dir {
        Some(d) => {
            let c = d.join("checkpoints");
            fs::create_dir_all(&c)?;
            Some(c)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed + DATA_SEED_OFFSET);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainingLog::default();
    let mut tokens_seen = 0usize;
    on_step(model, 0)?;
    while trainer.step() < config.max_steps {
        let mut batch = Vec::with_capacity(config.per_device_batch);
        while batch.len() < config.per_device_batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let out = trainer.train_step(model, &batch, tokens_seen)?;
        if let Some(rec) = out.update {
            tokens_seen = rec.tokens_seen;
            log.entries.push(rec);
            let done = rec.step + 1;
            on_step(model, done)?;
            if let Some(dir) = &ckpt_dir {
                let periodic = config.checkpoint_every > 0 && done % config.checkpoint_every == 0;
                if periodic || done == config.max_steps {
                    let path = checkpoint_path(dir, done);
                    let meta = BTreeMap::from([("step".to_string(), done.to_string())]);
                    save_checkpoint(&path, model, &meta)?;
                    log.checkpoints.push(path);
                }
            }
        }
    }
    if let Some(d) = out_dir {
        fs::write(d.join("train_log.tsv"), log.to_tsv())?;
    }
    Ok(log)
}
