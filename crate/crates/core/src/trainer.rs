//! Two-stream optimization with warm-restart learning rates, linear EMA and
//! weight-decay warmup, and checkpointing.

use std::path::Path;

use latpfn_autodiff::{Graph, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::data::ContextBatch;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{Model, ModelConfig, ParamId, ParamStore};
use crate::prior::{generate_context_batch, BatchShape, HyperPrior};
use crate::rng::{stream_rng, VALIDATION_STREAM};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Warm-restart cycle length in epochs.
    pub t0: usize,
    /// Peak learning rate multiplier per completed cycle.
    pub restart_decay: f64,
    pub warmup_epochs: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shape: BatchShape,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Contexts in the fixed validation set.
    pub validation_contexts: usize,
    /// Validate after every this many epochs; 0 disables validation.
    pub validate_every: usize,
    /// Optimize the decoder stream. Disabling it leaves every other
    /// parameter trajectory unchanged.
    pub train_decoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 9e-4,
            t0: 9,
            restart_decay: 0.96,
            warmup_epochs: 95.0,
            ema_start: 0.9952,
            ema_end: 1.0,
            wd_start: 1.77e-4,
            wd_end: 4.9e-2,
            batch_size: 32,
            batches_per_epoch: 250,
            epochs: 1,
            seed: 0,
            shape: BatchShape::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            validation_contexts: 16,
            validate_every: 1,
            train_decoder: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.t0 == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config(
                "t0, batch_size and batches_per_epoch must be >= 1".into(),
            ));
        }
        if !(self.base_lr >= 0.0) || !(self.restart_decay > 0.0) || !(self.warmup_epochs >= 0.0) {
            return Err(Error::Config(
                "base_lr, restart_decay and warmup_epochs out of range".into(),
            ));
        }
        for (name, v) in [("ema_start", self.ema_start), ("ema_end", self.ema_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} not in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Cosine annealing with warm restarts every `t0` epochs; the peak of
    /// cycle `c` is `base_lr * restart_decay^c`.
    pub fn lr_at(&self, epoch: usize, step_in_epoch: usize) -> f64 {
        let cycle = epoch / self.t0;
        let within = (epoch % self.t0) as f64 + step_in_epoch as f64 / self.batches_per_epoch as f64;
        let progress = within / self.t0 as f64;
        let peak = self.base_lr * self.restart_decay.powi(cycle as i32);
        0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// `(ema decay, weight decay)` at a fractional epoch, interpolated
    /// linearly over the warmup and held at the end values afterwards.
    pub fn warmup_at(&self, epoch: f64) -> (f64, f64) {
        let f = if self.warmup_epochs > 0.0 {
            (epoch / self.warmup_epochs).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let lerp = |a: f64, b: f64| (1.0 - f) * a + f * b;
        (lerp(self.ema_start, self.ema_end), lerp(self.wd_start, self.wd_end))
    }
}

/// Adaptive-moment optimizer with decoupled weight decay over a fixed set of
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let zeros = |&id: &ParamId| Tensor::zeros(store.get(id).shape());
        Self {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            t: 0,
        }
    }

    /// `grads` is aligned with `self.ids`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor<f32>], lr: f64, wd: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let decay = (lr * wd) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, cfg.eps as f32);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[k].data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= decay * *p;
                *p -= step * *m / (v.sqrt() / c2s + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub main_loss: f32,
    pub latent_loss: f32,
    pub si_loss: Option<f32>,
    pub decoder_loss: f32,
    pub grad_norm_main: f32,
    pub grad_norm_decoder: f32,
    /// Non-finite losses or gradients; parameters were left untouched.
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub skipped: usize,
    pub main_loss: f64,
    pub latent_loss: f64,
    pub decoder_loss: f64,
    pub lr: f64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub validation: Option<MetricsReport>,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub prior: HyperPrior,
    pub main_opt: AdamW,
    pub decoder_opt: AdamW,
    /// Completed optimization steps.
    pub step: u64,
}

fn norm(ts: &[Tensor<f32>]) -> f32 {
    ts.iter().flat_map(|t| t.data()).map(|&g| g * g).sum::<f32>().sqrt()
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, config: TrainConfig, prior: HyperPrior) -> Result<Self> {
        config.validate()?;
        prior.validate()?;
        let model = Model::new(model_cfg, config.seed)?;
        Ok(Self::from_model(model, config, prior))
    }

    pub fn from_model(model: Model, config: TrainConfig, prior: HyperPrior) -> Self {
        let main_ids = model.params.ids(|g| !g.is_decoder());
        let dec_ids = model.params.ids(|g| g.is_decoder());
        Self {
            main_opt: AdamW::new(&model.params, main_ids),
            decoder_opt: AdamW::new(&model.params, dec_ids),
            model,
            config,
            prior,
            step: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.config.batches_per_epoch as u64) as usize
    }

    fn position(&self) -> (usize, usize) {
        let bpe = self.config.batches_per_epoch as u64;
        ((self.step / bpe) as usize, (self.step % bpe) as usize)
    }

    /// Training batch for a global step; depends only on `(seed, step)`.
    pub fn batch_for_step(&self, step: u64) -> Result<Vec<ContextBatch>> {
        let mut rng = stream_rng(self.config.seed, step);
        (0..self.config.batch_size)
            .map(|_| {
                generate_context_batch(&self.prior, self.config.shape, self.model.config.si_targets, &mut rng)
                    .map(|d| d.batch)
            })
            .collect()
    }

    /// Fixed validation contexts, identical on every call.
    pub fn validation_set(&self) -> Result<Vec<ContextBatch>> {
        validation_set(
            &self.prior,
            self.config.shape,
            self.config.validation_contexts,
            self.config.seed,
            self.model.config.si_targets,
        )
    }

    /// One optimization step on `batches`.
    pub fn train_step(&mut self, batches: &[ContextBatch]) -> Result<StepReport> {
        let (epoch, within) = self.position();
        let lr = self.config.lr_at(epoch, within);
        let frac = epoch as f64 + within as f64 / self.config.batches_per_epoch as f64;
        let (ema_decay, wd) = self.config.warmup_at(frac);

        let x = self.model.inputs::<f32>(batches)?;
        let mut g = Graph::<f32>::new();
        let p = self.model.bind(&mut g);
        let e = self.model.bind_ema(&mut g, &p);
        let f = self.model.forward(&mut g, &p, Some(&e), &x)?;
        let (main, dec) = (f.main_loss.expect("target path"), f.decoder_loss.expect("target path"));
        let mut report = StepReport {
            step: self.step,
            epoch,
            lr,
            ema_decay,
            weight_decay: wd,
            main_loss: g.value(main).item(),
            latent_loss: g.value(f.latent_loss.expect("target path")).item(),
            si_loss: f.si_loss.map(|v| g.value(v).item()),
            decoder_loss: g.value(dec).item(),
            grad_norm_main: 0.0,
            grad_norm_decoder: 0.0,
            skipped: false,
        };
        self.step += 1;
        if !report.main_loss.is_finite() || !report.decoder_loss.is_finite() {
            report.skipped = true;
            return Ok(report);
        }
        let gm = g.backward(main)?;
        let main_grads: Vec<_> = self.main_opt.ids.iter().map(|&id| gm.get_or_zeros(p.get(id))).collect();
        drop(gm);
        let gd = g.backward(dec)?;
        let dec_grads: Vec<_> = self
            .decoder_opt
            .ids
            .iter()
            .map(|&id| gd.get_or_zeros(p.get(id)))
            .collect();
        drop(gd);
        report.grad_norm_main = norm(&main_grads);
        report.grad_norm_decoder = norm(&dec_grads);
        if !report.grad_norm_main.is_finite() || !report.grad_norm_decoder.is_finite() {
            report.skipped = true;
            return Ok(report);
        }
        self.main_opt
            .step(&mut self.model.params, &main_grads, lr, wd, &self.config);
        if self.config.train_decoder {
            self.decoder_opt
                .step(&mut self.model.params, &dec_grads, lr, wd, &self.config);
        }
        self.model.ema_update(ema_decay)?;
        Ok(report)
    }

    /// Runs `batches_per_epoch` steps on fresh synthetic batches, then
    /// validates if scheduled.
    pub fn train_epoch(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<EpochReport> {
        let epoch = self.epoch();
        let bpe = self.config.batches_per_epoch;
        let (mut main, mut lat, mut dec, mut skipped) = (0.0, 0.0, 0.0, 0);
        let mut last = None;
        for _ in 0..bpe {
            let batches = self.batch_for_step(self.step)?;
            let r = self.train_step(&batches)?;
            on_step(&r);
            if r.skipped {
                skipped += 1;
            } else {
                main += r.main_loss as f64;
                lat += r.latent_loss as f64;
                dec += r.decoder_loss as f64;
            }
            last = Some(r);
        }
        let ok = (bpe - skipped).max(1) as f64;
        let last = last.expect("at least one step");
        let validation = if self.config.validate_every > 0 && (epoch + 1) % self.config.validate_every == 0 {
            Some(evaluate(&self.model, &self.validation_set()?, self.config.batch_size)?)
        } else {
            None
        };
        Ok(EpochReport {
            epoch,
            steps: bpe,
            skipped,
            main_loss: main / ok,
            latent_loss: lat / ok,
            decoder_loss: dec / ok,
            lr: last.lr,
            ema_decay: last.ema_decay,
            weight_decay: last.weight_decay,
            validation,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = json!({
            "kind": "checkpoint",
            "format": CHECKPOINT_FORMAT,
            "model": self.model.config,
            "train": self.config,
            "prior": self.prior,
            "step": self.step,
            "rng": { "seed": self.config.seed, "next_stream": self.step },
            "main_t": self.main_opt.t,
            "decoder_t": self.decoder_opt.t,
        });
        let mut c = Container::new(meta);
        let store = &self.model.params;
        for id in 0..store.len() {
            c.push(format!("param/{}", store.name(id)), store.get(id).clone());
        }
        for (k, &id) in self.model.embedder_ids().iter().enumerate() {
            c.push(format!("ema/{}", store.name(id)), self.model.ema[k].clone());
        }
        for (tag, opt) in [("main", &self.main_opt), ("decoder", &self.decoder_opt)] {
            for (k, &id) in opt.ids.iter().enumerate() {
                c.push(format!("adam_{tag}/m/{}", store.name(id)), opt.m[k].clone());
                c.push(format!("adam_{tag}/v/{}", store.name(id)), opt.v[k].clone());
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("checkpoint") {
            return Err(Error::Data("container is not a checkpoint".into()));
        }
        let format = meta.get("format").and_then(|v| v.as_u64()).unwrap_or(0);
        if format != CHECKPOINT_FORMAT as u64 {
            return Err(Error::Data(format!(
                "checkpoint format {format} unsupported, expected {CHECKPOINT_FORMAT}"
            )));
        }
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Data(format!("checkpoint lacks '{k}'")))
        };
        let model_cfg: ModelConfig = serde_json::from_value(field("model")?)?;
        let config: TrainConfig = serde_json::from_value(field("train")?)?;
        let prior: HyperPrior = serde_json::from_value(field("prior")?)?;
        let mut model = Model::new(model_cfg, config.seed)?;
        for id in 0..model.params.len() {
            let name = model.params.name(id).to_string();
            model.params.set(id, c.require(&format!("param/{name}"))?.clone())?;
        }
        for (k, &id) in model.embedder_ids().to_vec().iter().enumerate() {
            let t = c.require(&format!("ema/{}", model.params.name(id)))?;
            if t.shape() != model.ema[k].shape() {
                return Err(Error::Shape(format!("EMA shadow shape {:?}", t.shape())));
            }
            model.ema[k] = t.clone();
        }
        let mut tr = Self::from_model(model, config, prior);
        tr.step = field("step")?.as_u64().unwrap_or(0);
        for (tag, key) in [("main", "main_t"), ("decoder", "decoder_t")] {
            let store = &tr.model.params;
            let opt = if tag == "main" {
                &mut tr.main_opt
            } else {
                &mut tr.decoder_opt
            };
            opt.t = field(key)?.as_u64().unwrap_or(0);
            for (k, &id) in opt.ids.iter().enumerate() {
                opt.m[k] = c.require(&format!("adam_{tag}/m/{}", store.name(id)))?.clone();
                opt.v[k] = c.require(&format!("adam_{tag}/v/{}", store.name(id)))?.clone();
            }
        }
        Ok(tr)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Contexts drawn from the validation streams of `seed`.
pub fn validation_set(
    prior: &HyperPrior,
    shape: BatchShape,
    count: usize,
    seed: u64,
    si_targets: usize,
) -> Result<Vec<ContextBatch>> {
    (0..count as u64)
        .map(|i| {
            let mut rng = stream_rng(seed, VALIDATION_STREAM + i);
            generate_context_batch(prior, shape, si_targets, &mut rng).map(|d| d.batch)
        })
        .collect()
}
