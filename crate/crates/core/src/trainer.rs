//! Two-stage training. Stage 1 trains every block on one modality;
//! stage 2 loads a stage-1 checkpoint, freezes the uncertainty and
//! alignment blocks, installs the gated input adapter and fine-tunes on
//! a new modality. Given (seed, config, data), every step — batch
//! order, forward, update — is deterministic, so checkpoints reproduce
//! byte for byte.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::clamp_logit_scale;
use crate::optim::{lr_at, AdamW, OptimConfig};
use crate::params::Forward;
use crate::scalar::Real;
use crate::synth::stream;

const DOM_EPOCH_SHUFFLE: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub cosine_decay: bool,
    pub seed: u64,
    /// Stage 2 only: also freeze the brain encoder (the uncertainty and
    /// alignment blocks are always frozen there).
    pub freeze_encoder: bool,
    /// Optional hard cap on optimizer steps (testing hook).
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Desk-scale stage-1 defaults (full-scale counterparts documented
    /// in the README).
    pub fn stage1(seed: u64) -> Self {
        TrainConfig {
            stage: 1,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            warmup_frac: 0.05,
            cosine_decay: true,
            seed,
            freeze_encoder: false,
            max_steps: None,
        }
    }

    /// Desk-scale stage-2 defaults: fewer epochs, halved peak rate.
    pub fn stage2(seed: u64) -> Self {
        TrainConfig {
            stage: 2,
            epochs: 20,
            learning_rate: 5e-4,
            ..TrainConfig::stage1(seed)
        }
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.stage == 1 || self.stage == 2) {
            problems.push(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            problems.push("batch_size must be >= 2".into());
        }
        if self.batch_size > n_train {
            problems.push(format!(
                "batch_size {} exceeds training set size {n_train}",
                self.batch_size
            ));
        }
        if self.learning_rate <= 0.0 {
            problems.push("learning_rate must be > 0".into());
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) {
            problems.push("warmup_frac must be in [0, 0.5]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn optim(&self) -> OptimConfig {
        OptimConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_mean_loss: Vec<f64>,
}

/// Run the optimization loop for the active stage.
pub fn train<T: Real>(model: &mut Model<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainReport> {
    data.validate()?;
    let n = data.n_samples();
    cfg.validate(n)?;
    if data.vision.dim() != model.cfg.k {
        return Err(Error::Config(format!(
            "dataset K = {} but model K = {}",
            data.vision.dim(),
            model.cfg.k
        )));
    }

    let steps_per_epoch = n / cfg.batch_size;
    let planned: usize = steps_per_epoch * cfg.epochs;
    let total_steps = match cfg.max_steps {
        Some(cap) => planned.min(cap),
        None => planned,
    };

    let mut opt = AdamW::new(&model.store, cfg.optim());
    let mut report = TrainReport {
        steps: 0,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        epoch_mean_loss: Vec::new(),
    };
    if total_steps == 0 {
        return Ok(report);
    }

    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = stream(cfg.seed, DOM_EPOCH_SHUFFLE, epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch_idx in 0..steps_per_epoch {
            if step >= total_steps {
                break 'epochs;
            }
            let lo = batch_idx * cfg.batch_size;
            let idx = &order[lo..lo + cfg.batch_size];
            let brain = data.brain.gather(idx);
            let vis = data.vision.gather(idx);
            let txt = data.text.gather(idx);

            let mut fwd = Forward::new(&model.store);
            let nodes = model.forward_batch(&mut fwd, &brain, &vis, &txt)?;
            let loss = fwd.tape.scalar_val(nodes.total).to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            if step == 0 {
                report.initial_loss = loss;
            }
            report.final_loss = loss;
            epoch_loss += loss;
            epoch_batches += 1;

            let grads = fwd.tape.backward(nodes.total);
            let param_grads = fwd.param_grads(&grads);
            let lr = lr_at(step, total_steps, cfg.learning_rate, cfg.warmup_frac, cfg.cosine_decay);
            opt.step(&mut model.store, &param_grads, lr);
            clamp_logit_scale(&mut model.store, &model.loss);
            step += 1;
        }
        if epoch_batches > 0 {
            report.epoch_mean_loss.push(epoch_loss / epoch_batches as f64);
        }
    }
    report.steps = step;
    Ok(report)
}

/// Stage 1: every block trainable.
pub fn train_stage1<T: Real>(model: &mut Model<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.stage != 1 {
        return Err(Error::Config(format!("train_stage1 called with stage {}", cfg.stage)));
    }
    if model.adapter.is_some() {
        return Err(Error::Config("stage 1 must run without an adapter".into()));
    }
    train(model, data, cfg)
}

/// Stage 2: freeze the uncertainty and alignment blocks, install the
/// gated adapter, and fine-tune on the new modality. The new data must
/// match the stage-1 input geometry.
pub fn train_stage2<T: Real>(model: &mut Model<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.stage != 2 {
        return Err(Error::Config(format!("train_stage2 called with stage {}", cfg.stage)));
    }
    if data.brain.channels() != model.cfg.channels || data.brain.timesteps() != model.cfg.timesteps {
        return Err(Error::Config(format!(
            "new modality geometry [{} x {}] does not match the pretrained encoder [{} x {}]",
            data.brain.channels(),
            data.brain.timesteps(),
            model.cfg.channels,
            model.cfg.timesteps
        )));
    }
    for prefix in Model::<T>::frozen_prefixes() {
        model.store.set_frozen_prefix(prefix, true);
    }
    if cfg.freeze_encoder {
        model.store.set_frozen_prefix("encoder.", true);
    }
    if model.adapter.is_none() {
        model.add_adapter();
    }
    train(model, data, cfg)
}
