//! The fusion model: mapping networks M1 (audio) and M2 (decoder signals)
//! produce one prefix token each, which precede the byte-token embeddings of
//! the 1-best hypothesis and a trailing SEP slot in a pre-norm decoder-only
//! transformer. The directedness decision is read from the logits at SEP.
//!
//! Training and scoring run on *packed* batches: every example contributes
//! only its prefix rows, its real (non-PAD) token rows and its SEP row, each
//! keeping its original position id. Because PAD keys are masked and PAD
//! outputs are never read, this is the same computation as running the full
//! right-padded layout.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{mean_pool, EmbeddingSequence, EncoderTrace, ToyEncoder, ToyEncoderConfig};
use crate::error::{Error, Result};
use crate::modality::ModalitySet;
use crate::nn::{
    dropout_mask, gelu, gelu_grad, join, LayerNorm, LayerNormCache, Linear, LinearCache,
    LoraAdapter, Module, Param,
};
use crate::seed::rng_for;
use crate::signals::{MinMaxScaler, N_SIGNALS};
use crate::tokenizer::{TokenId, TokenSequence, PAD, SEP, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            embed_dim: 64,
            n_layers: 4,
            n_heads: 4,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 67,
            ff_dim: 256,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            hidden_dim: 384,
            dropout: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AudioSource {
    /// Frame features pass through the built-in toy encoder.
    Toy(ToyEncoderConfig),
    /// Feature files already hold encoder embeddings of this width.
    Precomputed { dim: usize },
}

impl Default for AudioSource {
    fn default() -> Self {
        AudioSource::Toy(ToyEncoderConfig::default())
    }
}

impl AudioSource {
    /// Width N of the pooled embedding fed to M1.
    pub fn embedding_dim(&self) -> usize {
        match self {
            AudioSource::Toy(c) => c.output_dim,
            AudioSource::Precomputed { dim } => *dim,
        }
    }

    /// Width of the per-frame vectors stored in feature files.
    pub fn frame_dim(&self) -> usize {
        match self {
            AudioSource::Toy(c) => c.input_dim,
            AudioSource::Precomputed { dim } => *dim,
        }
    }
}

pub const DEFAULT_LORA_TARGETS: [&str; 2] = ["attn.q", "attn.v"];
pub const LORA_TARGET_NAMES: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "ff.up", "ff.down"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub base_frozen: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            r: 8,
            alpha: 32.0,
            targets: DEFAULT_LORA_TARGETS.iter().map(|s| s.to_string()).collect(),
            base_frozen: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub lm: LmConfig,
    /// Padded hypothesis length `l`.
    pub text_len: usize,
    pub modalities: ModalitySet,
    pub mapping: MappingConfig,
    pub audio: AudioSource,
    pub lora: Option<LoraConfig>,
    pub init_seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lm: LmConfig::default(),
            text_len: 64,
            modalities: ModalitySet::ALL,
            mapping: MappingConfig::default(),
            audio: AudioSource::default(),
            lora: None,
            init_seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let lm = &self.lm;
        if lm.embed_dim == 0 || lm.n_heads == 0 || lm.embed_dim % lm.n_heads != 0 {
            return Err(Error::validation(
                "lm.n_heads",
                format!("embed_dim {} not divisible by n_heads {}", lm.embed_dim, lm.n_heads),
            ));
        }
        if lm.n_layers == 0 || lm.ff_dim == 0 {
            return Err(Error::validation("lm", "n_layers and ff_dim must be >= 1"));
        }
        if lm.vocab_size < VOCAB_SIZE {
            return Err(Error::validation(
                "lm.vocab_size",
                format!("must be at least {VOCAB_SIZE}"),
            ));
        }
        if self.text_len == 0 {
            return Err(Error::validation("text_len", "must be >= 1"));
        }
        if lm.max_seq_len < self.text_len + 3 {
            return Err(Error::validation(
                "lm.max_seq_len",
                format!("must be >= text_len + 3 = {}", self.text_len + 3),
            ));
        }
        if !(0.0..1.0).contains(&lm.dropout) {
            return Err(Error::validation("lm.dropout", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.mapping.dropout) || self.mapping.hidden_dim == 0 {
            return Err(Error::validation("mapping", "bad hidden_dim or dropout"));
        }
        if let AudioSource::Toy(c) = &self.audio {
            c.validate()?;
        }
        if self.audio.embedding_dim() == 0 {
            return Err(Error::validation("audio", "embedding dim must be >= 1"));
        }
        if let Some(l) = &self.lora {
            validate_lora(l)?;
        }
        Ok(())
    }
}

fn validate_lora(cfg: &LoraConfig) -> Result<()> {
    if cfg.r == 0 {
        return Err(Error::validation("lora.r", "rank must be >= 1"));
    }
    if let Some(t) = cfg
        .targets
        .iter()
        .find(|t| !LORA_TARGET_NAMES.contains(&t.as_str()))
    {
        return Err(Error::Config(format!(
            "unknown LoRA target `{t}` (expected one of {LORA_TARGET_NAMES:?})"
        )));
    }
    if cfg.targets.is_empty() {
        return Err(Error::Config("LoRA target set is empty".into()));
    }
    Ok(())
}

/// One hidden tanh layer: `W2 tanh(W1 x + c1) + c2`, with dropout on the
/// hidden activations in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNetwork {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

pub struct MappingTrace {
    x: Array2<f64>,
    hidden_cache: LinearCache,
    act: Array2<f64>,
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
    out_cache: LinearCache,
}

impl MappingNetwork {
    pub fn new<R: Rng>(d_in: usize, hidden: usize, d_out: usize, dropout: f64, rng: &mut R) -> Self {
        MappingNetwork {
            hidden: Linear::fan_in(d_in, hidden, true, rng),
            out: Linear::fan_in(hidden, d_out, true, rng),
            dropout,
        }
    }

    pub fn d_in(&self) -> usize {
        self.hidden.d_in()
    }

    /// Maps each row of `x`. Pass an RNG to enable dropout.
    pub fn forward<R: Rng>(
        &self,
        x: ArrayView2<f64>,
        rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, MappingTrace)> {
        if x.ncols() != self.d_in() {
            return Err(Error::shape("mapping network input", self.d_in(), x.ncols()));
        }
        let (pre, hidden_cache) = self.hidden.forward(x);
        let act = pre.mapv(f64::tanh);
        let mask = dropout_mask(act.nrows(), act.ncols(), self.dropout, rng);
        let dropped = match &mask {
            Some(m) => &act * m,
            None => act.clone(),
        };
        let (y, out_cache) = self.out.forward(dropped.view());
        Ok((
            y,
            MappingTrace {
                x: x.to_owned(),
                hidden_cache,
                act,
                mask,
                dropped,
                out_cache,
            },
        ))
    }

    /// Single-vector evaluation-mode map.
    pub fn map(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        let (y, _) = self.forward::<rand_chacha::ChaCha8Rng>(x.view().insert_axis(Axis(0)), None)?;
        Ok(y.row(0).to_owned())
    }

    pub fn backward(&mut self, dy: ArrayView2<f64>, trace: &MappingTrace, need_dx: bool) -> Option<Array2<f64>> {
        let d_dropped = self
            .out
            .backward(trace.dropped.view(), dy, &trace.out_cache, true)
            .unwrap();
        let d_act = match &trace.mask {
            Some(m) => d_dropped * m,
            None => d_dropped,
        };
        let d_pre = d_act * &trace.act.mapv(|a| 1.0 - a * a);
        self.hidden
            .backward(trace.x.view(), d_pre.view(), &trace.hidden_cache, need_dx)
    }
}

impl Module for MappingNetwork {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl Block {
    fn new<R: Rng>(cfg: &LmConfig, rng: &mut R) -> Self {
        let e = cfg.embed_dim;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        Block {
            ln1: LayerNorm::new(e),
            q: Linear::normal(e, e, std, true, rng),
            k: Linear::normal(e, e, std, true, rng),
            v: Linear::normal(e, e, std, true, rng),
            o: Linear::normal(e, e, resid_std, true, rng),
            ln2: LayerNorm::new(e),
            up: Linear::normal(e, cfg.ff_dim, std, true, rng),
            down: Linear::normal(cfg.ff_dim, e, resid_std, true, rng),
        }
    }

    pub fn target_mut(&mut self, name: &str) -> Option<&mut Linear> {
        match name {
            "attn.q" => Some(&mut self.q),
            "attn.k" => Some(&mut self.k),
            "attn.v" => Some(&mut self.v),
            "attn.o" => Some(&mut self.o),
            "ff.up" => Some(&mut self.up),
            "ff.down" => Some(&mut self.down),
            _ => None,
        }
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.q.visit(&join(prefix, "attn.q"), f);
        self.k.visit(&join(prefix, "attn.k"), f);
        self.v.visit(&join(prefix, "attn.v"), f);
        self.o.visit(&join(prefix, "attn.o"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.up.visit(&join(prefix, "ff.up"), f);
        self.down.visit(&join(prefix, "ff.down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.q.visit_mut(&join(prefix, "attn.q"), f);
        self.k.visit_mut(&join(prefix, "attn.k"), f);
        self.v.visit_mut(&join(prefix, "attn.v"), f);
        self.o.visit_mut(&join(prefix, "attn.o"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.up.visit_mut(&join(prefix, "ff.up"), f);
        self.down.visit_mut(&join(prefix, "ff.down"), f);
    }
}

/// Contiguous rows of one sequence inside a packed activation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

struct BlockTrace {
    ln1: LayerNormCache,
    h1: Array2<f64>,
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    o_cache: LinearCache,
    drop_attn: Option<Array2<f64>>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    up_cache: LinearCache,
    up: Array2<f64>,
    act: Array2<f64>,
    down_cache: LinearCache,
    drop_ff: Option<Array2<f64>>,
}

/// Causal multi-head attention over each segment independently. Keys with
/// `key_mask[row] == false` get zero weight; a query with no visible key
/// outputs zeros.
fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    segments: &[Segment],
    key_mask: Option<&[bool]>,
    n_heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let e = q.ncols();
    let dh = e / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(segments.len() * n_heads);
    for seg in segments {
        let rows = seg.start..seg.start + seg.len;
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![rows.clone(), cols.clone()]);
            let ks = k.slice(s![rows.clone(), cols.clone()]);
            let vs = v.slice(s![rows.clone(), cols.clone()]);
            let mut p = qs.dot(&ks.t());
            for i in 0..seg.len {
                let mut row = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..seg.len {
                    let visible = j <= i && key_mask.map_or(true, |m| m[seg.start + j]);
                    if visible {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    } else {
                        row[j] = f64::NEG_INFINITY;
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                row.mapv_inplace(|x| x / total);
            }
            ctx.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vs));
            probs.push(p);
        }
    }
    (ctx, probs)
}

fn attention_backward(
    d_ctx: &Array2<f64>,
    trace: &BlockTrace,
    segments: &[Segment],
    n_heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let e = d_ctx.ncols();
    let dh = e / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(d_ctx.raw_dim());
    let mut dk = Array2::zeros(d_ctx.raw_dim());
    let mut dv = Array2::zeros(d_ctx.raw_dim());
    for (si, seg) in segments.iter().enumerate() {
        let rows = seg.start..seg.start + seg.len;
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &trace.probs[si * n_heads + h];
            let dc = d_ctx.slice(s![rows.clone(), cols.clone()]);
            let qs = trace.q.slice(s![rows.clone(), cols.clone()]);
            let ks = trace.k.slice(s![rows.clone(), cols.clone()]);
            let vs = trace.v.slice(s![rows.clone(), cols.clone()]);
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dc));
            let dp = dc.dot(&vs.t());
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = row.sum();
                row.zip_mut_with(&prow, |d, &pv| *d -= pv * dot);
            }
            ds *= scale;
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}

impl Block {
    fn forward<R: Rng>(
        &self,
        x: Array2<f64>,
        segments: &[Segment],
        key_mask: Option<&[bool]>,
        n_heads: usize,
        dropout: f64,
        mut rng: Option<&mut R>,
    ) -> (Array2<f64>, BlockTrace) {
        let (h1, ln1) = self.ln1.forward(x.view());
        let (q, q_cache) = self.q.forward(h1.view());
        let (k, k_cache) = self.k.forward(h1.view());
        let (v, v_cache) = self.v.forward(h1.view());
        let (ctx, probs) = attention(&q, &k, &v, segments, key_mask, n_heads);
        let (mut o, o_cache) = self.o.forward(ctx.view());
        let drop_attn = dropout_mask(o.nrows(), o.ncols(), dropout, rng.as_deref_mut());
        if let Some(m) = &drop_attn {
            o *= m;
        }
        let x_mid = &x + &o;
        let (h2, ln2) = self.ln2.forward(x_mid.view());
        let (up, up_cache) = self.up.forward(h2.view());
        let act = up.mapv(gelu);
        let (mut down, down_cache) = self.down.forward(act.view());
        let drop_ff = dropout_mask(down.nrows(), down.ncols(), dropout, rng);
        if let Some(m) = &drop_ff {
            down *= m;
        }
        let out = &x_mid + &down;
        let trace = BlockTrace {
            ln1,
            h1,
            q_cache,
            k_cache,
            v_cache,
            q,
            k,
            v,
            probs,
            ctx,
            o_cache,
            drop_attn,
            ln2,
            h2,
            up_cache,
            up,
            act,
            down_cache,
            drop_ff,
        };
        (out, trace)
    }

    fn backward(
        &mut self,
        d_out: Array2<f64>,
        trace: &BlockTrace,
        segments: &[Segment],
        n_heads: usize,
    ) -> Array2<f64> {
        let d_down = match &trace.drop_ff {
            Some(m) => &d_out * m,
            None => d_out.clone(),
        };
        let d_act = self
            .down
            .backward(trace.act.view(), d_down.view(), &trace.down_cache, true)
            .unwrap();
        let d_up = d_act * &trace.up.mapv(gelu_grad);
        let d_h2 = self
            .up
            .backward(trace.h2.view(), d_up.view(), &trace.up_cache, true)
            .unwrap();
        let d_mid = d_out + &self.ln2.backward(d_h2.view(), &trace.ln2);

        let d_o = match &trace.drop_attn {
            Some(m) => &d_mid * m,
            None => d_mid.clone(),
        };
        let d_ctx = self
            .o
            .backward(trace.ctx.view(), d_o.view(), &trace.o_cache, true)
            .unwrap();
        let (dq, dk, dv) = attention_backward(&d_ctx, trace, segments, n_heads);
        let h1 = trace.h1.view();
        let mut d_h1 = self.q.backward(h1, dq.view(), &trace.q_cache, true).unwrap();
        d_h1 += &self.k.backward(h1, dk.view(), &trace.k_cache, true).unwrap();
        d_h1 += &self.v.backward(h1, dv.view(), &trace.v_cache, true).unwrap();
        d_mid + &self.ln1.backward(d_h1.view(), &trace.ln1)
    }
}

/// Audio for one example: raw frames for the model's encoder, or an already
/// pooled embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioInput {
    Frames(Array2<f64>),
    Pooled(Array1<f64>),
}

/// Everything the model may consume for one utterance. Channels the model's
/// modality set does not include are ignored; channels it does include but
/// which are absent here are omitted from the prefix (modality dropout).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Hypothesis tokens padded to `text_len`.
    pub tokens: TokenSequence,
    pub audio: Option<AudioInput>,
    /// Min-max scaled decoder signals.
    pub ds: Option<[f64; N_SIGNALS]>,
}

/// Optional audio prefix `a` and decoder-signal prefix `b`, both E-vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrefixBundle {
    pub a: Option<Array1<f64>>,
    pub b: Option<Array1<f64>>,
}

impl PrefixBundle {
    pub fn count(&self) -> usize {
        usize::from(self.a.is_some()) + usize::from(self.b.is_some())
    }
}

/// Full right-padded input layout `[a?][b?][t_1..t_l][SEP]`.
#[derive(Debug, Clone)]
pub struct AssembledInput {
    /// Embedded rows including position embeddings, `(P + l + 1) x E`.
    pub rows: Array2<f64>,
    /// `false` at PAD positions; those are never used as attention keys.
    pub key_mask: Vec<bool>,
    pub decision_position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMaskMode {
    #[default]
    DecisionOnly,
    FullSequence,
}

/// A logit row requested from the packed forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenTarget {
    pub example: usize,
    /// Row in the returned logits matrix.
    pub logit_row: usize,
    pub token: TokenId,
}

pub struct BatchForward {
    /// Logits for all requested rows: the first `n_examples` rows are the
    /// decision (SEP) rows in example order, followed by token targets.
    pub logits: Array2<f64>,
    pub token_targets: Vec<TokenTarget>,
    trace: BatchTrace,
}

struct ExampleLayout {
    audio_slot: Option<usize>,
    ds_slot: Option<usize>,
    sep_row: usize,
}

struct BatchTrace {
    segments: Vec<Segment>,
    row_tokens: Vec<Option<TokenId>>,
    row_positions: Vec<usize>,
    layouts: Vec<ExampleLayout>,
    audio_examples: Vec<usize>,
    ds_examples: Vec<usize>,
    m1: Option<MappingTrace>,
    m2: Option<MappingTrace>,
    encoder_traces: Vec<(usize, EncoderTrace)>,
    drop_embed: Option<Array2<f64>>,
    blocks: Vec<BlockTrace>,
    head_rows: Vec<usize>,
    ln_f: LayerNormCache,
    head_in: Array2<f64>,
    head_cache: LinearCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    pub m1: Option<MappingNetwork>,
    pub m2: Option<MappingNetwork>,
    pub encoder: Option<ToyEncoder>,
    pub scaler: MinMaxScaler,
}

impl FusionModel {
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.init_seed, "fusion-model/init");
        let lm = &config.lm;
        let e = lm.embed_dim;
        let tok_emb = Param::normal(lm.vocab_size, e, 0.02, &mut rng);
        let pos_emb = Param::normal(lm.max_seq_len, e, 0.01, &mut rng);
        let blocks = (0..lm.n_layers).map(|_| Block::new(lm, &mut rng)).collect();
        let head = Linear::normal(e, lm.vocab_size, 0.02, false, &mut rng);
        let mods = config.modalities;
        let m1 = mods.audio.then(|| {
            MappingNetwork::new(
                config.audio.embedding_dim(),
                config.mapping.hidden_dim,
                e,
                config.mapping.dropout,
                &mut rng,
            )
        });
        let m2 = mods.ds.then(|| {
            MappingNetwork::new(
                N_SIGNALS,
                config.mapping.hidden_dim,
                e,
                config.mapping.dropout,
                &mut rng,
            )
        });
        let encoder = match (&config.audio, mods.audio) {
            (AudioSource::Toy(c), true) => {
                let mut enc_rng = rng_for(config.init_seed, "fusion-model/encoder");
                Some(ToyEncoder::new(c.clone(), &mut enc_rng)?)
            }
            _ => None,
        };
        let mut model = FusionModel {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(e),
            head,
            m1,
            m2,
            encoder,
            scaler: MinMaxScaler::default(),
        };
        if let Some(l) = model.config.lora.clone() {
            model.attach_lora(&l)?;
        }
        Ok(model)
    }

    pub fn modalities(&self) -> ModalitySet {
        self.config.modalities
    }

    pub fn text_len(&self) -> usize {
        self.config.text_len
    }

    pub fn embed_dim(&self) -> usize {
        self.config.lm.embed_dim
    }

    /// Attaches adapters to the configured targets in every block and records
    /// the LoRA config. `B` starts at zero, so outputs are unchanged.
    pub fn apply_lora(&mut self, cfg: &LoraConfig) -> Result<()> {
        self.attach_lora(cfg)?;
        self.config.lora = Some(cfg.clone());
        Ok(())
    }

    fn attach_lora(&mut self, cfg: &LoraConfig) -> Result<()> {
        validate_lora(cfg)?;
        let mut rng = rng_for(self.config.init_seed, "fusion-model/lora");
        if cfg.base_frozen {
            self.freeze_lm();
        }
        let scale = cfg.alpha / cfg.r as f64;
        for block in &mut self.blocks {
            for target in &cfg.targets {
                let lin = block
                    .target_mut(target)
                    .ok_or_else(|| Error::Config(format!("unknown LoRA target `{target}`")))?;
                let (d_in, d_out) = (lin.d_in(), lin.d_out());
                let bound = 1.0 / (d_in as f64).sqrt();
                lin.lora = Some(LoraAdapter {
                    a: Param::uniform(cfg.r, d_in, bound, &mut rng),
                    b: Param::zeros(d_out, cfg.r, true),
                    scale,
                });
            }
        }
        Ok(())
    }

    /// Freezes every language-model parameter (embeddings, blocks, final norm
    /// and head); adapters attached later stay trainable.
    pub fn freeze_lm(&mut self) {
        self.tok_emb.trainable = false;
        self.pos_emb.trainable = false;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), &mut |name, p| {
                if !name.contains("lora_") {
                    p.trainable = false;
                }
            });
        }
        self.ln_f.visit_mut("", &mut |_, p| p.trainable = false);
        self.head.visit_mut("", &mut |_, p| p.trainable = false);
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    pub fn count_trainable_params(&self) -> usize {
        count_trainable_params(self)
    }

    fn check_inputs(&self, input: &ModelInput) -> Result<()> {
        if self.config.modalities.text && input.tokens.len() != self.text_len() {
            return Err(Error::shape(
                "hypothesis tokens (padded length)",
                self.text_len(),
                input.tokens.len(),
            ));
        }
        if let Some(ds) = &input.ds {
            if self.config.modalities.ds && ds.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::validation(
                    "ds",
                    "decoder signals must be min-max scaled into [0, 1]",
                ));
            }
        }
        if let (Some(AudioInput::Frames(f)), true) = (&input.audio, self.config.modalities.audio) {
            if self.encoder.is_none() {
                return Err(Error::Input(
                    "raw audio frames given but the model has no toy encoder".into(),
                ));
            }
            if f.ncols() != self.config.audio.frame_dim() {
                return Err(Error::shape("audio frames", self.config.audio.frame_dim(), f.ncols()));
            }
        }
        if let (Some(AudioInput::Pooled(p)), true) = (&input.audio, self.config.modalities.audio) {
            if p.len() != self.config.audio.embedding_dim() {
                return Err(Error::shape(
                    "pooled audio embedding",
                    self.config.audio.embedding_dim(),
                    p.len(),
                ));
            }
        }
        Ok(())
    }

    /// Errors unless `input` carries every channel of the model's modality set.
    pub fn require_complete(&self, input: &ModelInput) -> Result<()> {
        let m = self.config.modalities;
        if m.audio && input.audio.is_none() {
            return Err(Error::Input("audio features missing for an audio model".into()));
        }
        if m.ds && input.ds.is_none() {
            return Err(Error::Input("decoder signals missing for a DS model".into()));
        }
        Ok(())
    }

    /// Pools audio to the M1 input vector (eval mode).
    pub fn pooled_audio(&self, audio: &AudioInput) -> Result<Array1<f64>> {
        match audio {
            AudioInput::Pooled(p) => Ok(p.clone()),
            AudioInput::Frames(f) => {
                let enc = self
                    .encoder
                    .as_ref()
                    .ok_or_else(|| Error::Input("model has no toy encoder".into()))?;
                Ok(mean_pool(&enc.encode(f.view())?))
            }
        }
    }

    pub fn map_audio(&self, pooled: &Array1<f64>) -> Result<Array1<f64>> {
        let m1 = self
            .m1
            .as_ref()
            .ok_or_else(|| Error::Input("model has no audio mapping network".into()))?;
        m1.map(pooled)
    }

    pub fn map_ds(&self, scaled: &[f64; N_SIGNALS]) -> Result<Array1<f64>> {
        if scaled.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("ds", "decoder signals outside [0, 1]"));
        }
        let m2 = self
            .m2
            .as_ref()
            .ok_or_else(|| Error::Input("model has no decoder-signal mapping network".into()))?;
        m2.map(&Array1::from(scaled.to_vec()))
    }

    /// Builds the eval-mode prefix bundle for an input.
    pub fn prefix_bundle(&self, input: &ModelInput) -> Result<PrefixBundle> {
        self.check_inputs(input)?;
        let m = self.config.modalities;
        let a = match (&input.audio, m.audio) {
            (Some(audio), true) => Some(self.map_audio(&self.pooled_audio(audio)?)?),
            _ => None,
        };
        let b = match (&input.ds, m.ds) {
            (Some(ds), true) => Some(self.map_ds(ds)?),
            _ => None,
        };
        Ok(PrefixBundle { a, b })
    }

    /// Lays out `[a?][b?][tok(t_1)..tok(t_l)][SEP]` with position embeddings.
    /// Models without the text modality see an all-PAD hypothesis.
    pub fn assemble_input(&self, bundle: &PrefixBundle, tokens: &TokenSequence) -> Result<AssembledInput> {
        let e = self.embed_dim();
        if tokens.len() != self.text_len() {
            return Err(Error::shape("padded tokens", self.text_len(), tokens.len()));
        }
        let p = bundle.count();
        let total = p + tokens.len() + 1;
        let mut rows = Array2::zeros((total, e));
        let mut key_mask = vec![true; total];
        let mut r = 0;
        for v in [&bundle.a, &bundle.b].into_iter().flatten() {
            if v.len() != e {
                return Err(Error::shape("prefix vector", e, v.len()));
            }
            rows.row_mut(r).assign(v);
            r += 1;
        }
        let use_text = self.config.modalities.text;
        for &id in &tokens.ids {
            let id = if use_text { id } else { PAD };
            rows.row_mut(r).assign(&self.tok_emb.value.row(id as usize));
            key_mask[r] = id != PAD;
            r += 1;
        }
        rows.row_mut(r).assign(&self.tok_emb.value.row(SEP as usize));
        rows += &self.pos_emb.value.slice(s![..total, ..]);
        Ok(AssembledInput {
            rows,
            key_mask,
            decision_position: r,
        })
    }

    /// Runs the transformer on one embedded sequence and returns logits for
    /// every position. Eval mode.
    pub fn forward_lm(&self, inputs: &Array2<f64>, key_mask: &[bool]) -> Result<Array2<f64>> {
        Ok(self.forward_lm_traced(inputs, key_mask)?.0)
    }

    /// Like [`forward_lm`](Self::forward_lm), also returning the attention
    /// probabilities of every layer, indexed `[layer][head]`.
    pub fn forward_lm_traced(
        &self,
        inputs: &Array2<f64>,
        key_mask: &[bool],
    ) -> Result<(Array2<f64>, Vec<Vec<Array2<f64>>>)> {
        let len = inputs.nrows();
        if len > self.config.lm.max_seq_len {
            return Err(Error::Length {
                len,
                max: self.config.lm.max_seq_len,
            });
        }
        if inputs.ncols() != self.embed_dim() || key_mask.len() != len {
            return Err(Error::shape(
                "forward_lm inputs",
                format!("{len}x{}", self.embed_dim()),
                format!("{}x{} (mask {})", len, inputs.ncols(), key_mask.len()),
            ));
        }
        let segments = [Segment { start: 0, len }];
        let mut x = inputs.clone();
        let mut attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, trace) = block.forward::<rand_chacha::ChaCha8Rng>(
                x,
                &segments,
                Some(key_mask),
                self.config.lm.n_heads,
                0.0,
                None,
            );
            attn.push(trace.probs);
            x = out;
        }
        let (h, _) = self.ln_f.forward(x.view());
        let (logits, _) = self.head.forward(h.view());
        Ok((logits, attn))
    }

    /// Packed forward pass over a batch. With an RNG, dropout is active.
    /// `mode` decides whether hypothesis-token logits are produced in addition
    /// to the decision rows.
    pub fn forward_batch<R: Rng>(
        &self,
        batch: &[&ModelInput],
        mode: LossMaskMode,
        mut rng: Option<&mut R>,
    ) -> Result<BatchForward> {
        let m = self.config.modalities;
        let e = self.embed_dim();
        let l = self.text_len();
        let dropout = self.config.lm.dropout;

        let mut segments = Vec::with_capacity(batch.len());
        let mut row_tokens: Vec<Option<TokenId>> = Vec::new();
        let mut row_positions: Vec<usize> = Vec::new();
        let mut layouts = Vec::with_capacity(batch.len());
        let mut audio_examples = Vec::new();
        let mut ds_examples = Vec::new();
        let mut token_rows: Vec<(usize, usize, TokenId)> = Vec::new();

        for (ei, input) in batch.iter().enumerate() {
            self.check_inputs(input)?;
            let start = row_tokens.len();
            let mut pos = 0;
            let mut audio_slot = None;
            let mut ds_slot = None;
            if m.audio && input.audio.is_some() {
                audio_slot = Some(row_tokens.len());
                audio_examples.push(ei);
                row_tokens.push(None);
                row_positions.push(pos);
                pos += 1;
            }
            if m.ds && input.ds.is_some() {
                ds_slot = Some(row_tokens.len());
                ds_examples.push(ei);
                row_tokens.push(None);
                row_positions.push(pos);
                pos += 1;
            }
            let p = pos;
            let real: &[TokenId] = if m.text { input.tokens.real_ids() } else { &[] };
            for (j, &id) in real.iter().enumerate() {
                if mode == LossMaskMode::FullSequence && row_tokens.len() > start {
                    // predicted from the preceding row
                    token_rows.push((ei, row_tokens.len() - 1, id));
                }
                row_tokens.push(Some(id));
                row_positions.push(p + j);
            }
            let sep_row = row_tokens.len();
            row_tokens.push(Some(SEP));
            row_positions.push(p + l);
            if p + l >= self.config.lm.max_seq_len {
                return Err(Error::Length {
                    len: p + l + 1,
                    max: self.config.lm.max_seq_len,
                });
            }
            segments.push(Segment {
                start,
                len: sep_row + 1 - start,
            });
            layouts.push(ExampleLayout {
                audio_slot,
                ds_slot,
                sep_row,
            });
        }

        let n_rows = row_tokens.len();
        let mut x = Array2::zeros((n_rows, e));
        for (r, tok) in row_tokens.iter().enumerate() {
            let mut row = x.row_mut(r);
            if let Some(id) = tok {
                row.assign(&self.tok_emb.value.row(*id as usize));
            }
            row += &self.pos_emb.value.row(row_positions[r]);
        }

        // audio prefixes
        let mut encoder_traces = Vec::new();
        let m1_trace = if audio_examples.is_empty() {
            None
        } else {
            let m1 = self.m1.as_ref().expect("audio modality implies M1");
            let mut pooled = Array2::zeros((audio_examples.len(), m1.d_in()));
            for (k, &ei) in audio_examples.iter().enumerate() {
                match batch[ei].audio.as_ref().unwrap() {
                    AudioInput::Pooled(p) => pooled.row_mut(k).assign(p),
                    AudioInput::Frames(f) => {
                        let enc = self.encoder.as_ref().unwrap();
                        let (h, trace) = enc.forward(f.view());
                        let seq = EmbeddingSequence::new(h)?;
                        pooled.row_mut(k).assign(&mean_pool(&seq));
                        if enc.config.trainable {
                            encoder_traces.push((k, trace));
                        }
                    }
                }
            }
            let (a, trace) = m1.forward(pooled.view(), rng.as_deref_mut())?;
            for (k, &ei) in audio_examples.iter().enumerate() {
                let mut row = x.row_mut(layouts[ei].audio_slot.unwrap());
                row += &a.row(k);
            }
            Some(trace)
        };
        let m2_trace = if ds_examples.is_empty() {
            None
        } else {
            let m2 = self.m2.as_ref().expect("ds modality implies M2");
            let mut sig = Array2::zeros((ds_examples.len(), N_SIGNALS));
            for (k, &ei) in ds_examples.iter().enumerate() {
                let ds = batch[ei].ds.as_ref().unwrap();
                sig.row_mut(k).assign(&ndarray::ArrayView1::from(&ds[..]));
            }
            let (b, trace) = m2.forward(sig.view(), rng.as_deref_mut())?;
            for (k, &ei) in ds_examples.iter().enumerate() {
                let mut row = x.row_mut(layouts[ei].ds_slot.unwrap());
                row += &b.row(k);
            }
            Some(trace)
        };

        let drop_embed = dropout_mask(n_rows, e, dropout, rng.as_deref_mut());
        if let Some(mask) = &drop_embed {
            x *= mask;
        }

        let mut block_traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, trace) = block.forward(
                x,
                &segments,
                None,
                self.config.lm.n_heads,
                dropout,
                rng.as_deref_mut(),
            );
            block_traces.push(trace);
            x = out;
        }

        let mut head_rows: Vec<usize> = layouts.iter().map(|lay| lay.sep_row).collect();
        let token_targets: Vec<TokenTarget> = token_rows
            .iter()
            .enumerate()
            .map(|(i, &(example, row, token))| {
                head_rows.push(row);
                TokenTarget {
                    example,
                    logit_row: batch.len() + i,
                    token,
                }
            })
            .collect();
        let selected = x.select(Axis(0), &head_rows);
        let (head_in, ln_f) = self.ln_f.forward(selected.view());
        let (logits, head_cache) = self.head.forward(head_in.view());

        Ok(BatchForward {
            logits,
            token_targets,
            trace: BatchTrace {
                segments,
                row_tokens,
                row_positions,
                layouts,
                audio_examples,
                ds_examples,
                m1: m1_trace,
                m2: m2_trace,
                encoder_traces,
                drop_embed,
                blocks: block_traces,
                head_rows,
                ln_f,
                head_in,
                head_cache,
            },
        })
    }

    /// Accumulates gradients of a scalar loss given `d_logits = dL/dlogits`
    /// for the rows returned by [`forward_batch`](Self::forward_batch).
    pub fn backward(&mut self, fwd: &BatchForward, d_logits: &Array2<f64>) {
        let t = &fwd.trace;
        let e = self.embed_dim();
        let d_head_in = self
            .head
            .backward(t.head_in.view(), d_logits.view(), &t.head_cache, true)
            .unwrap();
        let d_selected = self.ln_f.backward(d_head_in.view(), &t.ln_f);
        let n_rows = t.row_tokens.len();
        let mut dx = Array2::zeros((n_rows, e));
        for (k, &r) in t.head_rows.iter().enumerate() {
            let mut row = dx.row_mut(r);
            row += &d_selected.row(k);
        }
        let n_heads = self.config.lm.n_heads;
        for (block, trace) in self.blocks.iter_mut().zip(&t.blocks).rev() {
            dx = block.backward(dx, trace, &t.segments, n_heads);
        }
        if let Some(mask) = &t.drop_embed {
            dx *= mask;
        }

        if self.tok_emb.trainable {
            for (r, tok) in t.row_tokens.iter().enumerate() {
                if let Some(id) = tok {
                    let mut g = self.tok_emb.grad.row_mut(*id as usize);
                    g += &dx.row(r);
                }
            }
        }
        if self.pos_emb.trainable {
            for (r, &p) in t.row_positions.iter().enumerate() {
                let mut g = self.pos_emb.grad.row_mut(p);
                g += &dx.row(r);
            }
        }

        if let (Some(trace), Some(m1)) = (&t.m1, self.m1.as_mut()) {
            let rows: Vec<usize> = t
                .audio_examples
                .iter()
                .map(|&ei| t.layouts[ei].audio_slot.unwrap())
                .collect();
            let da = dx.select(Axis(0), &rows);
            let need_dx = !t.encoder_traces.is_empty();
            let d_pooled = m1.backward(da.view(), trace, need_dx);
            if let (Some(d_pooled), Some(enc)) = (d_pooled, self.encoder.as_mut()) {
                for (k, enc_trace) in &t.encoder_traces {
                    let frames = enc_trace_len(enc_trace);
                    let row = d_pooled.row(*k).to_owned() / frames as f64;
                    let d_out = Array2::from_shape_fn((frames, row.len()), |(_, j)| row[j]);
                    enc.backward(d_out.view(), enc_trace);
                }
            }
        }
        if let (Some(trace), Some(m2)) = (&t.m2, self.m2.as_mut()) {
            let rows: Vec<usize> = t
                .ds_examples
                .iter()
                .map(|&ei| t.layouts[ei].ds_slot.unwrap())
                .collect();
            let db = dx.select(Axis(0), &rows);
            m2.backward(db.view(), trace, false);
        }
    }
}

fn enc_trace_len(trace: &EncoderTrace) -> usize {
    trace.frames()
}

impl Module for FusionModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "tok_emb"), &self.tok_emb);
        f(&join(prefix, "pos_emb"), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.head.visit(&join(prefix, "head"), f);
        if let Some(m) = &self.m1 {
            m.visit(&join(prefix, "m1"), f);
        }
        if let Some(m) = &self.m2 {
            m.visit(&join(prefix, "m2"), f);
        }
        if let Some(enc) = &self.encoder {
            enc.visit(&join(prefix, "encoder"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "tok_emb"), &mut self.tok_emb);
        f(&join(prefix, "pos_emb"), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        if let Some(m) = &mut self.m1 {
            m.visit_mut(&join(prefix, "m1"), f);
        }
        if let Some(m) = &mut self.m2 {
            m.visit_mut(&join(prefix, "m2"), f);
        }
        if let Some(enc) = &mut self.encoder {
            enc.visit_mut(&join(prefix, "encoder"), f);
        }
    }
}

/// Number of scalar parameters with gradients enabled.
pub fn count_trainable_params(module: &dyn Module) -> usize {
    let mut n = 0;
    module.visit("", &mut |_, p| {
        if p.trainable {
            n += p.len();
        }
    });
    n
}

/// Closed-form adapter parameter count `sum over targets of r (d_in + d_out)`
/// for a stack of `n_layers` identical blocks.
pub fn lora_param_count(r: usize, n_layers: usize, target_dims: &[(usize, usize)]) -> usize {
    n_layers * target_dims.iter().map(|(i, o)| r * (i + o)).sum::<usize>()
}
