//! Turns manifests into model-ready examples.

use std::path::Path;

use ndarray::Array2;

use crate::corpus::{read_manifest, Label, UtteranceRecord};
use crate::encoder::{mean_pool, EmbeddingSequence};
use crate::error::{Error, Result};
use crate::features::read_features;
use crate::model::{AudioInput, FusionModel, ModelInput};
use crate::signals::{DecoderSignals, MinMaxScaler};
use crate::tokenizer::{pad_tokens, TokenId, Tokenizer, NO, YES};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub label: Label,
    pub input: ModelInput,
    /// Drawn from the auxiliary text-only corpus (no prefixes).
    pub text_only: bool,
}

pub fn label_token(label: Label) -> TokenId {
    match label {
        Label::Directed => YES,
        Label::NonDirected => NO,
    }
}

/// Directory containing the manifest; `audio_ref`s are relative to it.
pub fn manifest_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or_else(|| Path::new("."))
}

pub fn load_frames(path: &Path) -> Result<Array2<f64>> {
    Ok(read_features(path)?.mapv(f64::from))
}

/// Fits a min-max scaler on the raw decoder signals of `records`.
pub fn fit_scaler(records: &[UtteranceRecord]) -> Result<MinMaxScaler> {
    let raw: Vec<DecoderSignals> = records
        .iter()
        .map(|r| DecoderSignals(r.decoder_signals_raw))
        .collect();
    MinMaxScaler::fit(&raw)
}

/// Builds complete examples for `model`. Audio is mean-pooled up front
/// whenever the encoder cannot change during training.
pub fn build_examples(
    model: &FusionModel,
    records: &[UtteranceRecord],
    dir: &Path,
) -> Result<Vec<Example>> {
    let mods = model.modalities();
    let l = model.text_len();
    let pool_early = model.encoder.as_ref().map_or(true, |e| !e.config.trainable);
    records
        .iter()
        .map(|r| {
            r.validate()?;
            let tokens = pad_tokens(&Tokenizer.tokenize(&r.transcript), l);
            let audio = if mods.audio {
                let path = r.audio_path(dir);
                let frames = load_frames(&path)?;
                if frames.ncols() != model.config.audio.frame_dim() {
                    return Err(Error::shape(
                        format!("features of `{}`", r.id),
                        model.config.audio.frame_dim(),
                        frames.ncols(),
                    ));
                }
                if frames.nrows() == 0 {
                    return Err(Error::Data(format!("`{}` has zero audio frames", r.id)));
                }
                Some(if !pool_early {
                    AudioInput::Frames(frames)
                } else if model.encoder.is_some() {
                    AudioInput::Pooled(model.pooled_audio(&AudioInput::Frames(frames))?)
                } else {
                    AudioInput::Pooled(mean_pool(&EmbeddingSequence::new(frames)?))
                })
            } else {
                None
            };
            let ds = if mods.ds {
                Some(model.scaler.transform(&DecoderSignals(r.decoder_signals_raw))?.0)
            } else {
                None
            };
            Ok(Example {
                id: r.id.clone(),
                label: r.label,
                input: ModelInput { tokens, audio, ds },
                text_only: false,
            })
        })
        .collect()
}

/// Text-only examples: the transcript and label only. Feature files are not
/// touched.
pub fn build_text_only(model: &FusionModel, records: &[UtteranceRecord]) -> Result<Vec<Example>> {
    if !model.modalities().text {
        return Err(Error::Config(
            "a text-only corpus needs a model with the text modality".into(),
        ));
    }
    let l = model.text_len();
    Ok(records
        .iter()
        .map(|r| Example {
            id: r.id.clone(),
            label: r.label,
            input: ModelInput {
                tokens: pad_tokens(&Tokenizer.tokenize(&r.transcript), l),
                audio: None,
                ds: None,
            },
            text_only: true,
        })
        .collect())
}

pub fn load_examples(model: &FusionModel, manifest: &Path) -> Result<Vec<Example>> {
    let records = read_manifest(manifest)?;
    build_examples(model, &records, manifest_dir(manifest))
}
