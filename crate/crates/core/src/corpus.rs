//! Synthetic corpus generation and JSONL manifest I/O.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::features;
use crate::seed::rng_for;
use crate::templates::{self, Pool, TRIGGER_PHRASE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Directed,
    NonDirected,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::Directed => Label::NonDirected,
            Label::NonDirected => Label::Directed,
        }
    }

    pub fn is_directed(self) -> bool {
        self == Label::Directed
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Directed => "directed",
            Label::NonDirected => "non_directed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "directed" => Some(Label::Directed),
            "non_directed" => Some(Label::NonDirected),
            _ => None,
        }
    }

    fn pool(self) -> Pool {
        match self {
            Label::Directed => Pool::Command,
            Label::NonDirected => Pool::Background,
        }
    }
}

/// One example. `decoder_signals_raw` is `[avg graph cost, avg acoustic cost,
/// avg confidence, avg alternatives]`; `audio_ref` is relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub label: Label,
    pub transcript: String,
    pub audio_ref: String,
    pub decoder_signals_raw: [f64; 4],
    pub has_trigger_phrase: bool,
}

impl UtteranceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("id", "must be non-empty"));
        }
        let conf = self.decoder_signals_raw[2];
        if !(0.0..=1.0).contains(&conf) {
            return Err(Error::validation(
                "decoder_signals_raw",
                format!("average confidence {conf} outside [0, 1]"),
            ));
        }
        if self.decoder_signals_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("decoder_signals_raw", "non-finite value"));
        }
        Ok(())
    }

    pub fn audio_path(&self, manifest_dir: &Path) -> PathBuf {
        manifest_dir.join(&self.audio_ref)
    }

    fn from_value(value: Value) -> std::result::Result<Self, Error> {
        let Value::Object(mut obj) = value else {
            return Err(Error::Schema {
                field: "<record>".into(),
                reason: "expected a JSON object".into(),
            });
        };
        const FIELDS: [&str; 6] = [
            "id",
            "label",
            "transcript",
            "audio_ref",
            "decoder_signals_raw",
            "has_trigger_phrase",
        ];
        if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(Error::Schema {
                field: extra.clone(),
                reason: "unknown field".into(),
            });
        }
        fn take<T: serde::de::DeserializeOwned>(
            obj: &mut serde_json::Map<String, Value>,
            name: &str,
        ) -> Result<T> {
            let v = obj.remove(name).ok_or_else(|| Error::Schema {
                field: name.into(),
                reason: "missing field".into(),
            })?;
            serde_json::from_value(v).map_err(|e| Error::Schema {
                field: name.into(),
                reason: e.to_string(),
            })
        }
        let record = UtteranceRecord {
            id: take(&mut obj, "id")?,
            label: take(&mut obj, "label")?,
            transcript: take(&mut obj, "transcript")?,
            audio_ref: take(&mut obj, "audio_ref")?,
            decoder_signals_raw: take(&mut obj, "decoder_signals_raw")?,
            has_trigger_phrase: take(&mut obj, "has_trigger_phrase")?,
        };
        Ok(record)
    }
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let record = UtteranceRecord::from_value(value).map_err(|e| match e {
            Error::Schema { field, reason } => Error::Schema {
                field,
                reason: format!("{reason} (line {})", i + 1),
            },
            other => other,
        })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

/// Which class the synthetic decoder signals are drawn for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderSignalSource {
    /// The class of the audio frames: swapped audio also swaps the signals,
    /// since a real decoder derives them from the audio.
    #[default]
    AudioChannel,
    /// The true label, independent of any swapped channel.
    Label,
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_directed: usize,
    pub n_non_directed: usize,
    pub frame_dim: usize,
    pub frames_range: [usize; 2],
    pub class_mean_separation: f64,
    pub feature_noise_sigma: f64,
    pub p_text_ambiguous: f64,
    pub p_audio_ambiguous: f64,
    pub trigger_phrase_rate: f64,
    pub seed: u64,
    /// Split name. Splits of one seed share the class-conditional feature
    /// distributions but draw independent examples; ids outside `train` carry
    /// the split name as a prefix.
    pub split: String,
    pub decoder_signals_follow: DecoderSignalSource,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_directed: 2000,
            n_non_directed: 2000,
            frame_dim: 20,
            frames_range: [20, 60],
            class_mean_separation: 1.0,
            feature_noise_sigma: 1.0,
            p_text_ambiguous: 0.15,
            p_audio_ambiguous: 0.15,
            trigger_phrase_rate: 0.21,
            seed: 0,
            split: TRAIN_SPLIT.to_string(),
            decoder_signals_follow: DecoderSignalSource::AudioChannel,
        }
    }
}

fn check_fraction(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::validation(field, format!("{v} is not in [0, 1]")));
    }
    Ok(())
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.split.is_empty() || !self.split.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::validation("split", "must be a non-empty [A-Za-z0-9_] name"));
        }
        if self.frame_dim == 0 {
            return Err(Error::validation("frame_dim", "must be >= 1"));
        }
        let [lo, hi] = self.frames_range;
        if lo == 0 || lo > hi {
            return Err(Error::validation(
                "frames_range",
                format!("need 1 <= min <= max, got [{lo}, {hi}]"),
            ));
        }
        if !self.class_mean_separation.is_finite() || self.class_mean_separation < 0.0 {
            return Err(Error::validation(
                "class_mean_separation",
                "must be finite and >= 0",
            ));
        }
        if !self.feature_noise_sigma.is_finite() || self.feature_noise_sigma <= 0.0 {
            return Err(Error::validation("feature_noise_sigma", "must be finite and > 0"));
        }
        check_fraction("p_text_ambiguous", self.p_text_ambiguous)?;
        check_fraction("p_audio_ambiguous", self.p_audio_ambiguous)?;
        check_fraction("trigger_phrase_rate", self.trigger_phrase_rate)?;
        if self.p_text_ambiguous + self.p_audio_ambiguous > 1.0 {
            return Err(Error::validation(
                "p_audio_ambiguous",
                "p_text_ambiguous + p_audio_ambiguous must be <= 1",
            ));
        }
        Ok(())
    }

    /// Exact per-class ambiguity quotas `(text, audio)`.
    pub fn quotas(&self, class_count: usize) -> (usize, usize) {
        let text = ((self.p_text_ambiguous * class_count as f64).round() as usize).min(class_count);
        let audio = ((self.p_audio_ambiguous * class_count as f64).round() as usize)
            .min(class_count - text);
        (text, audio)
    }
}

/// Which channels of an example were swapped to the opposite class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    pub id: String,
    pub label: Label,
    pub text_ambiguous: bool,
    pub audio_ambiguous: bool,
    pub text_pool: Pool,
    pub template: usize,
}

#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub record: UtteranceRecord,
    pub assignment: Assignment,
    pub frames: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub manifest: PathBuf,
    pub records: Vec<UtteranceRecord>,
    pub assignments: Vec<Assignment>,
}

// Affine scales for the synthetic decoder costs. Arbitrary units; min-max
// scaling removes them downstream.
const GRAPH_COST_BASE: f64 = 8.0;
const GRAPH_COST_SLOPE: f64 = 10.0;
const GRAPH_COST_NOISE: f64 = 1.5;
const ACOUSTIC_COST_BASE: f64 = 2.0;
const ACOUSTIC_COST_SLOPE: f64 = 6.0;
const ACOUSTIC_COST_NOISE: f64 = 0.5;
const ALTERNATIVES_BASE: f64 = 1.0;
const ALTERNATIVES_SLOPE: f64 = 4.0;
const ALTERNATIVES_NOISE: f64 = 0.5;

fn synth_decoder_signals<R: Rng>(label: Label, rng: &mut R) -> [f64; 4] {
    let (mean, sd) = match label {
        Label::Directed => (0.85, 0.10),
        Label::NonDirected => (0.55, 0.15),
    };
    let conf: f64 = Normal::<f64>::new(mean, sd).unwrap().sample(rng).clamp(0.0, 1.0);
    let gap = 1.0 - conf;
    let noise = |sd: f64, rng: &mut R| Normal::new(0.0, sd).unwrap().sample(rng);
    let graph = GRAPH_COST_BASE + GRAPH_COST_SLOPE * gap + noise(GRAPH_COST_NOISE, rng);
    let acoustic = ACOUSTIC_COST_BASE + ACOUSTIC_COST_SLOPE * gap + noise(ACOUSTIC_COST_NOISE, rng);
    let alts = (ALTERNATIVES_BASE + ALTERNATIVES_SLOPE * gap + noise(ALTERNATIVES_NOISE, rng))
        .max(0.0);
    [graph, acoustic, conf, alts]
}

/// Unit vector along which the two audio classes' means are separated.
fn class_direction(spec: &CorpusSpec) -> Vec<f64> {
    let mut rng = rng_for(spec.seed, "class-direction");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..spec.frame_dim).map(|_| normal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

pub const TRAIN_SPLIT: &str = "train";

fn example_id(split: &str, label: Label, index: usize) -> String {
    let base = match label {
        Label::Directed => format!("dir-{index:05}"),
        Label::NonDirected => format!("non-{index:05}"),
    };
    if split == TRAIN_SPLIT {
        base
    } else {
        format!("{split}-{base}")
    }
}

/// Generates the corpus in memory. Directed examples come first.
pub fn synthesize(spec: &CorpusSpec) -> Result<Vec<SynthUtterance>> {
    spec.validate()?;
    let direction = class_direction(spec);
    let mut out = Vec::with_capacity(spec.n_directed + spec.n_non_directed);
    for (label, count) in [
        (Label::Directed, spec.n_directed),
        (Label::NonDirected, spec.n_non_directed),
    ] {
        let (n_text, n_audio) = spec.quotas(count);
        let mut order: Vec<usize> = (0..count).collect();
        let key = if spec.split == TRAIN_SPLIT {
            format!("quota/{}", label.as_str())
        } else {
            format!("quota/{}/{}", spec.split, label.as_str())
        };
        order.shuffle(&mut rng_for(spec.seed, &key));
        let mut text_amb = vec![false; count];
        let mut audio_amb = vec![false; count];
        for &i in &order[..n_text] {
            text_amb[i] = true;
        }
        for &i in &order[n_text..n_text + n_audio] {
            audio_amb[i] = true;
        }
        for i in 0..count {
            let id = example_id(&spec.split, label, i);
            out.push(synth_one(spec, &direction, label, id, text_amb[i], audio_amb[i]));
        }
    }
    Ok(out)
}

fn synth_one(
    spec: &CorpusSpec,
    direction: &[f64],
    label: Label,
    id: String,
    text_ambiguous: bool,
    audio_ambiguous: bool,
) -> SynthUtterance {
    let mut rng = rng_for(spec.seed, &id);
    let text_class = if text_ambiguous { label.flipped() } else { label };
    let audio_class = if audio_ambiguous { label.flipped() } else { label };

    let pool = text_class.pool();
    let (template, body) = templates::sample(pool, &mut rng);
    let has_trigger = pool == Pool::Command && rng.gen_bool(spec.trigger_phrase_rate);
    let transcript = if has_trigger {
        format!("{TRIGGER_PHRASE} {body}")
    } else {
        body
    };

    let [lo, hi] = spec.frames_range;
    let t = rng.gen_range(lo..=hi);
    let sign = if audio_class.is_directed() { 0.5 } else { -0.5 };
    let noise = Normal::new(0.0, spec.feature_noise_sigma).unwrap();
    let mut frames = Array2::<f32>::zeros((t, spec.frame_dim));
    for mut row in frames.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            let mean = sign * spec.class_mean_separation * direction[k];
            *v = (mean + noise.sample(&mut rng)) as f32;
        }
    }

    let ds_class = match spec.decoder_signals_follow {
        DecoderSignalSource::AudioChannel => audio_class,
        DecoderSignalSource::Label => label,
    };
    let decoder_signals_raw = synth_decoder_signals(ds_class, &mut rng);

    let record = UtteranceRecord {
        audio_ref: format!("features/{id}.afea"),
        id: id.clone(),
        label,
        transcript,
        decoder_signals_raw,
        has_trigger_phrase: has_trigger,
    };
    let assignment = Assignment {
        id,
        label,
        text_ambiguous,
        audio_ambiguous,
        text_pool: pool,
        template,
    };
    SynthUtterance {
        record,
        assignment,
        frames,
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";

/// Generates the corpus and writes `manifest.jsonl`, `assignments.jsonl` and
/// one `features/<id>.afea` per record under `out_dir`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<GeneratedCorpus> {
    let utterances = synthesize(spec)?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    for u in &utterances {
        features::write_features(&u.record.audio_path(out_dir), &u.frames)?;
    }
    let records: Vec<UtteranceRecord> = utterances.iter().map(|u| u.record.clone()).collect();
    let assignments: Vec<Assignment> = utterances.into_iter().map(|u| u.assignment).collect();
    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &records)?;

    let log_path = out_dir.join(ASSIGNMENTS_FILE);
    let mut log = String::new();
    for a in &assignments {
        log.push_str(&serde_json::to_string(a).unwrap());
        log.push('\n');
    }
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;

    Ok(GeneratedCorpus {
        manifest,
        records,
        assignments,
    })
}
