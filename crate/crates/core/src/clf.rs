//! The CLF audio baseline: a per-frame linear layer N -> 256, mean pooling
//! over time and a final linear layer 256 -> 2, on frozen encoder outputs.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, UtteranceRecord};
use crate::dataset::{load_frames, manifest_dir};
use crate::encoder::{mean_pool, EmbeddingSequence, ToyEncoder};
use crate::error::{Error, Result};
use crate::model::AudioSource;
use crate::nn::{join, log_softmax, Linear, Module, Param};
use crate::seed::rng_for;
use crate::train::{lr_at, AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClfConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub effective_batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClfConfig {
    fn default() -> Self {
        ClfConfig {
            hidden_dim: 256,
            epochs: 10,
            effective_batch_size: 32,
            peak_lr: 2e-5,
            warmup_fraction: 0.10,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl ClfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::validation("train.hidden_dim", "must be >= 1"));
        }
        if self.epochs == 0 || self.effective_batch_size == 0 {
            return Err(Error::validation("train.epochs", "epochs and batch size must be >= 1"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::validation("train.warmup_fraction", "must be in (0, 1)"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::validation("train.peak_lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClfModel {
    pub audio: AudioSource,
    pub frame: Linear,
    pub out: Linear,
    /// Frozen feature extractor; `None` for precomputed embeddings.
    pub encoder: Option<ToyEncoder>,
}

impl ClfModel {
    pub fn new(audio: AudioSource, hidden_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "clf/init");
        let encoder = match &audio {
            AudioSource::Toy(c) => {
                let mut cfg = c.clone();
                cfg.trainable = false;
                let mut enc_rng = rng_for(seed, "fusion-model/encoder");
                Some(ToyEncoder::new(cfg, &mut enc_rng)?)
            }
            AudioSource::Precomputed { .. } => None,
        };
        let n = audio.embedding_dim();
        Ok(ClfModel {
            audio,
            frame: Linear::fan_in(n, hidden_dim, true, &mut rng),
            out: Linear::fan_in(hidden_dim, 2, true, &mut rng),
            encoder,
        })
    }

    /// Encoder output for one utterance's frames.
    pub fn embed(&self, frames: &Array2<f64>) -> Result<EmbeddingSequence> {
        match &self.encoder {
            Some(enc) => enc.encode(frames.view()),
            None => {
                if frames.ncols() != self.audio.embedding_dim() {
                    return Err(Error::shape(
                        "precomputed embeddings",
                        self.audio.embedding_dim(),
                        frames.ncols(),
                    ));
                }
                EmbeddingSequence::new(frames.clone())
            }
        }
    }

    /// Logits `[z_directed, z_non_directed]` from a pooled embedding. Since the
    /// frame layer is affine, pooling its outputs equals applying it to the
    /// pooled embedding.
    pub fn logits_pooled(&self, pooled: &Array1<f64>) -> Array1<f64> {
        let x = pooled.view().insert_axis(Axis(0));
        let (h, _) = self.frame.forward(x);
        let (z, _) = self.out.forward(h.view());
        z.row(0).to_owned()
    }

    /// Reference form: frame layer on every frame, then pool, then output.
    pub fn logits_framewise(&self, seq: &EmbeddingSequence) -> Array1<f64> {
        let (h, _) = self.frame.forward(seq.values().view());
        let pooled = h.mean_axis(Axis(0)).unwrap();
        let (z, _) = self.out.forward(pooled.view().insert_axis(Axis(0)));
        z.row(0).to_owned()
    }

    /// Softmax probability of the directed class.
    pub fn score_pooled(&self, pooled: &Array1<f64>) -> f64 {
        let z = self.logits_pooled(pooled);
        1.0 / (1.0 + (z[1] - z[0]).exp())
    }

    pub fn pooled_features(&self, records: &[UtteranceRecord], manifest: &std::path::Path) -> Result<Vec<Array1<f64>>> {
        let dir = manifest_dir(manifest);
        records
            .iter()
            .map(|r| {
                let frames = load_frames(&r.audio_path(dir))?;
                Ok(mean_pool(&self.embed(&frames)?))
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

impl Module for ClfModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.frame.visit(&join(prefix, "frame"), f);
        self.out.visit(&join(prefix, "out"), f);
        if let Some(e) = &self.encoder {
            e.visit(&join(prefix, "encoder"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.frame.visit_mut(&join(prefix, "frame"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
        if let Some(e) = &mut self.encoder {
            e.visit_mut(&join(prefix, "encoder"), f);
        }
    }
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Directed => 0,
        Label::NonDirected => 1,
    }
}

/// Mean cross-entropy over a batch; accumulates gradients.
fn clf_loss_grad(model: &mut ClfModel, x: &Array2<f64>, labels: &[Label]) -> f64 {
    let (h, hc) = model.frame.forward(x.view());
    let (z, zc) = model.out.forward(h.view());
    let n = labels.len() as f64;
    let mut dz = Array2::zeros(z.raw_dim());
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let lp = log_softmax(z.row(i).as_slice().unwrap());
        let c = class_index(label);
        loss -= lp[c];
        for k in 0..2 {
            dz[[i, k]] = lp[k].exp() / n;
        }
        dz[[i, c]] -= 1.0 / n;
    }
    let dh = model.out.backward(h.view(), dz.view(), &zc, true).unwrap();
    model.frame.backward(x.view(), dh.view(), &hc, false);
    loss / n
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClfReport {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

/// Trains the classifier on pooled frozen-encoder features.
pub fn train_clf_baseline(
    model: &mut ClfModel,
    pooled: &[Array1<f64>],
    labels: &[Label],
    cfg: &ClfConfig,
) -> Result<ClfReport> {
    cfg.validate()?;
    if pooled.is_empty() || pooled.len() != labels.len() {
        return Err(Error::Data("CLF training set is empty or misaligned".into()));
    }
    let steps_per_epoch = pooled.len().div_ceil(cfg.effective_batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::new(AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    });
    let dim = pooled[0].len();
    let mut report = ClfReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pooled.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("clf/epoch/{epoch}")));
        let mut total_loss = 0.0;
        for chunk in order.chunks(cfg.effective_batch_size) {
            let mut x = Array2::zeros((chunk.len(), dim));
            let mut ys = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).assign(&pooled[i]);
                ys.push(labels[i]);
            }
            model.zero_grad();
            let loss = clf_loss_grad(model, &x, &ys);
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite CLF loss at step {step}")));
            }
            let lr = lr_at(step + 1, total, cfg.peak_lr, cfg.warmup_fraction)?;
            opt.step(model, lr)?;
            report.step_losses.push(loss);
            total_loss += loss;
            step += 1;
        }
        report.epoch_losses.push(total_loss / steps_per_epoch as f64);
    }
    Ok(report)
}
