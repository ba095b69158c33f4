//! Training objective, AdamW with a linear warmup/decay schedule, and the
//! training loop with text-only mixing and gradient accumulation.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{label_token, Example};
use crate::error::{Error, Result};
use crate::model::{FusionModel, LossMaskMode, ModelInput};
use crate::nn::{log_softmax, Module, Param};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub effective_batch_size: usize,
    pub micro_batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss_mask_mode: LossMaskMode,
    /// Text-only examples blended into each epoch. `None` means half the
    /// multimodal count when a text-only corpus is supplied.
    pub text_only_mix: Option<usize>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (CLI only).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            effective_batch_size: 32,
            micro_batch_size: 32,
            peak_lr: 1e-4,
            warmup_fraction: 0.10,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_mask_mode: LossMaskMode::DecisionOnly,
            text_only_mix: None,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// Full-scale values: 60 epochs, effective batch 256.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 60,
            effective_batch_size: 256,
            micro_batch_size: 32,
            ..TrainConfig::default()
        }
    }

    pub fn accum_steps(&self) -> usize {
        self.effective_batch_size / self.micro_batch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("train.epochs", "must be >= 1"));
        }
        if self.micro_batch_size == 0
            || self.effective_batch_size == 0
            || self.effective_batch_size % self.micro_batch_size != 0
        {
            return Err(Error::validation(
                "train.effective_batch_size",
                format!(
                    "{} is not a positive multiple of micro_batch_size {}",
                    self.effective_batch_size, self.micro_batch_size
                ),
            ));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::validation("train.warmup_fraction", "must be in (0, 1)"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::validation("train.peak_lr", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("train.weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::validation("train.beta1", "betas must be in [0, 1), eps > 0"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::validation("train.checkpoint_every", "must be >= 1"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear ramp from 0 to `peak` over `w = round(warmup_fraction * total)`
/// steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("learning-rate schedule with zero total steps".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total {total_steps}")));
    }
    let w = (warmup_fraction * total_steps as f64).round() as usize;
    Ok(if step < w {
        peak * step as f64 / w as f64
    } else if step == w {
        peak
    } else {
        peak * (total_steps - step) as f64 / (total_steps - w) as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update of a flat tensor. `t` is the 1-based step count used for
/// bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        if decay {
            value[i] -= lr * cfg.weight_decay * value[i];
        }
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        value[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// AdamW state over the trainable parameters of a module, keyed by visit
/// order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            moments: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; refuses (without touching anything) if any
    /// trainable gradient is non-finite.
    pub fn step(&mut self, module: &mut dyn Module, lr: f64) -> Result<()> {
        let mut bad = None;
        module.visit("", &mut |name, p| {
            if bad.is_none() && p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Training(format!("non-finite gradient in `{name}`")));
        }
        self.t += 1;
        let t = self.t;
        let cfg = self.config;
        let moments = &mut self.moments;
        let mut idx = 0;
        module.visit_mut("", &mut |_, p: &mut Param| {
            if !p.trainable {
                return;
            }
            if moments.len() <= idx {
                moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
            }
            let (m, v) = &mut moments[idx];
            let decay = p.decay;
            let grad = p.grad.as_slice().expect("standard layout");
            let value = p.value.as_slice_mut().expect("standard layout");
            adamw_update(value, grad, m, v, t, lr, &cfg, decay);
            idx += 1;
        });
        Ok(())
    }
}

pub fn grad_norm(module: &dyn Module) -> f64 {
    let mut sq = 0.0;
    module.visit("", &mut |_, p| {
        if p.trainable {
            sq += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Mean over the batch of the per-example loss; in `full_sequence` mode each
/// example's loss also sums the hypothesis-token terms. Gradients of
/// `weight * loss` are accumulated into the model. Pass an RNG for dropout.
pub fn accumulate_loss_grad(
    model: &mut FusionModel,
    batch: &[&Example],
    mode: LossMaskMode,
    rng: Option<&mut ChaCha8Rng>,
    weight: f64,
) -> Result<f64> {
    let (loss, fwd, d_logits) = loss_and_dlogits(model, batch, mode, rng)?;
    model.backward(&fwd, &(d_logits * weight));
    Ok(loss)
}

/// Loss without gradients (eval mode).
pub fn compute_loss(model: &FusionModel, batch: &[&Example], mode: LossMaskMode) -> Result<f64> {
    Ok(loss_and_dlogits(model, batch, mode, None)?.0)
}

fn loss_and_dlogits(
    model: &FusionModel,
    batch: &[&Example],
    mode: LossMaskMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, crate::model::BatchForward, Array2<f64>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let inputs: Vec<&ModelInput> = batch.iter().map(|e| &e.input).collect();
    let fwd = model.forward_batch(&inputs, mode, rng)?;
    let n = batch.len() as f64;
    let mut d = Array2::zeros(fwd.logits.raw_dim());
    let mut total = 0.0;
    let mut term = |row: usize, target: usize, d: &mut Array2<f64>| {
        let lp = log_softmax(fwd.logits.row(row).as_slice().unwrap());
        total -= lp[target];
        let mut drow = d.row_mut(row);
        for (k, l) in lp.iter().enumerate() {
            drow[k] = l.exp() / n;
        }
        drow[target] -= 1.0 / n;
    };
    for (i, ex) in batch.iter().enumerate() {
        term(i, label_token(ex.label) as usize, &mut d);
    }
    for t in &fwd.token_targets {
        term(t.logit_row, t.token as usize, &mut d);
    }
    Ok((total / n, fwd, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LossRecord>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub total_steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,epoch,lr,loss,grad_norm").unwrap();
    for r in log {
        writeln!(out, "{},{},{:e},{},{}", r.step, r.epoch, r.lr, r.loss, r.grad_norm).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Number of optimizer steps for a stream of `n` examples per epoch.
pub fn total_steps(n: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs * n.div_ceil(cfg.effective_batch_size)
}

fn epoch_stream<'a>(
    train: &'a [Example],
    text_only: &'a [Example],
    mix: usize,
    seed: u64,
    epoch: usize,
) -> Vec<&'a Example> {
    let mut rng = rng_for(seed, &format!("epoch/{epoch}"));
    let mut stream: Vec<&Example> = train.iter().collect();
    if mix > 0 && !text_only.is_empty() {
        let mut pool: Vec<&Example> = text_only.iter().collect();
        pool.shuffle(&mut rng);
        stream.extend(pool.iter().cycle().take(mix));
    }
    stream.shuffle(&mut rng);
    stream
}

pub fn train(
    model: &mut FusionModel,
    train_set: &[Example],
    text_only: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, train_set, text_only, cfg, &mut |_, _| Ok(()), None)
}

/// Training loop. `on_epoch(epoch, model)` runs after every epoch; `max_steps`
/// stops early (the schedule still spans the full run).
pub fn train_with(
    model: &mut FusionModel,
    train_set: &[Example],
    text_only: &[Example],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &FusionModel) -> Result<()>,
    max_steps: Option<usize>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training manifest is empty".into()));
    }
    if model.modalities().ds && !model.scaler.fitted {
        return Err(Error::Config("decoder-signal scaler must be fitted before training".into()));
    }
    if !text_only.is_empty() && !model.modalities().text {
        return Err(Error::Config(
            "text-only mixing requires the text modality".into(),
        ));
    }
    for ex in train_set {
        model.require_complete(&ex.input)?;
    }
    let mix = if text_only.is_empty() {
        0
    } else {
        cfg.text_only_mix.unwrap_or(train_set.len() / 2)
    };
    let per_epoch = train_set.len() + mix;
    let total = total_steps(per_epoch, cfg);
    let mut opt = AdamW::new(cfg.adamw());
    let mut dropout_rng = rng_for(cfg.seed, "dropout");
    let mut report = TrainReport {
        total_steps: total,
        ..TrainReport::default()
    };
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let stream = epoch_stream(train_set, text_only, mix, cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for chunk in stream.chunks(cfg.effective_batch_size) {
            if max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            model.zero_grad();
            let mut loss = 0.0;
            for micro in chunk.chunks(cfg.micro_batch_size) {
                let w = micro.len() as f64 / chunk.len() as f64;
                loss += w * accumulate_loss_grad(
                    model,
                    micro,
                    cfg.loss_mask_mode,
                    Some(&mut dropout_rng),
                    w,
                )?;
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {step}")));
            }
            let lr = lr_at(step + 1, total, cfg.peak_lr, cfg.warmup_fraction)?;
            let gn = grad_norm(model);
            opt.step(model, lr)
                .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
            report.log.push(LossRecord {
                step,
                epoch,
                lr,
                loss,
                grad_norm: gn,
            });
            epoch_loss += loss;
            epoch_steps += 1;
            step += 1;
        }
        report.epoch_losses.push(epoch_loss / epoch_steps as f64);
        on_epoch(epoch, model)?;
    }
    Ok(report)
}
