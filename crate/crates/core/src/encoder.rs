//! Audio encoder: a frame-wise toy encoder (or precomputed embeddings) and
//! mean pooling over time.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features;
use crate::nn::{join, Linear, LinearCache, Module, Param};

/// A `T x N` sequence of frame embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    values: Array2<f64>,
}

impl EmbeddingSequence {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (t, n) = values.dim();
        if t == 0 {
            return Err(Error::validation("T", "embedding sequence needs at least one frame"));
        }
        if n == 0 {
            return Err(Error::validation("N", "embedding dimension must be >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("values", "non-finite embedding entry"));
        }
        Ok(EmbeddingSequence { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// `(1/T) * sum_t h_t`. Each column is summed in sorted order, so the result
/// is bit-identical under any permutation of the frames.
pub fn mean_pool(seq: &EmbeddingSequence) -> Array1<f64> {
    let t = seq.frames() as f64;
    let mut column = Vec::with_capacity(seq.frames());
    seq.values
        .columns()
        .into_iter()
        .map(|c| {
            column.clear();
            column.extend(c.iter().copied());
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / t
        })
        .collect()
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSequence> {
    let raw = features::read_features(path)?;
    EmbeddingSequence::new(raw.mapv(f64::from))
}

/// Writes an embedding sequence as `AFEA` (values rounded to f32).
pub fn write_embeddings(path: &Path, seq: &EmbeddingSequence) -> Result<()> {
    features::write_features(path, &seq.values.mapv(|v| v as f32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub n_layers: usize,
    pub trainable: bool,
    /// Adds a previous-frame term to the first layer (ablation only).
    pub temporal_mixing: bool,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        ToyEncoderConfig {
            input_dim: 20,
            hidden_dim: 64,
            output_dim: 64,
            n_layers: 1,
            trainable: false,
            temporal_mixing: false,
        }
    }
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("output_dim", self.output_dim),
            ("n_layers", self.n_layers),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Stack of `tanh(h W + b)` layers applied to each frame independently:
/// `n_layers` hidden layers followed by a tanh output layer of width N.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub config: ToyEncoderConfig,
    pub layers: Vec<Linear>,
    /// Previous-frame weights for the first layer when temporal mixing is on.
    pub mix: Option<Param>,
}

pub struct EncoderTrace {
    inputs: Vec<Array2<f64>>,
    caches: Vec<LinearCache>,
    outputs: Vec<Array2<f64>>,
}

impl EncoderTrace {
    pub fn frames(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }
}

impl ToyEncoder {
    pub fn new<R: Rng>(config: ToyEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend(std::iter::repeat(config.hidden_dim).take(config.n_layers));
        dims.push(config.output_dim);
        let layers: Vec<Linear> = dims
            .windows(2)
            .map(|w| Linear::fan_in(w[0], w[1], true, rng))
            .collect();
        let mix = config.temporal_mixing.then(|| {
            let bound = 1.0 / (config.input_dim as f64).sqrt();
            Param::uniform(config.input_dim, dims[1], bound, rng)
        });
        let mut enc = ToyEncoder {
            config,
            layers,
            mix,
        };
        let trainable = enc.config.trainable;
        enc.visit_mut("", &mut |_, p| p.trainable = trainable);
        Ok(enc)
    }

    fn check_input(&self, features: ArrayView2<f64>) -> Result<()> {
        let (t, f) = features.dim();
        if f != self.config.input_dim {
            return Err(Error::shape(
                "encoder input feature dim",
                self.config.input_dim,
                f,
            ));
        }
        if t == 0 {
            return Err(Error::validation("T", "feature matrix has no frames"));
        }
        Ok(())
    }

    pub fn encode(&self, features: ArrayView2<f64>) -> Result<EmbeddingSequence> {
        self.check_input(features)?;
        let (out, _) = self.forward(features);
        EmbeddingSequence::new(out)
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> (Array2<f64>, EncoderTrace) {
        let mut trace = EncoderTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            caches: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut h = features.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut pre, cache) = layer.forward(h.view());
            if i == 0 {
                if let Some(mix) = &self.mix {
                    let t = h.nrows();
                    if t > 1 {
                        let prev = h.slice(s![..t - 1, ..]).dot(&mix.value);
                        let mut tail = pre.slice_mut(s![1.., ..]);
                        tail += &prev;
                    }
                }
            }
            let out = pre.mapv(f64::tanh);
            trace.inputs.push(h);
            trace.caches.push(cache);
            trace.outputs.push(out.clone());
            h = out;
        }
        (h, trace)
    }

    /// Backpropagates `d_out` (T x N) into the encoder parameters.
    pub fn backward(&mut self, d_out: ArrayView2<f64>, trace: &EncoderTrace) {
        let mut grad = d_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            let out = &trace.outputs[i];
            let dpre = &grad * &out.mapv(|y| 1.0 - y * y);
            let x = &trace.inputs[i];
            if i == 0 {
                if let Some(mix) = self.mix.as_mut().filter(|m| m.trainable) {
                    let t = x.nrows();
                    if t > 1 {
                        mix.grad += &x
                            .slice(s![..t - 1, ..])
                            .t()
                            .dot(&dpre.slice(s![1.., ..]));
                    }
                }
            }
            let need_dx = i > 0;
            let dx = self.layers[i].backward(x.view(), dpre.view(), &trace.caches[i], need_dx);
            match dx {
                Some(dx) => grad = dx,
                None => break,
            }
        }
    }
}

impl Module for ToyEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
        if let Some(m) = &self.mix {
            f(&join(prefix, "mix"), m);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
        if let Some(m) = &mut self.mix {
            f(&join(prefix, "mix"), m);
        }
    }
}
