//! Experiment configuration files and the shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clf::ClfConfig;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::modality::ModalitySet;
use crate::model::{FusionConfig, LoraConfig};
use crate::train::TrainConfig;

/// How the experiment's model is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainSection {
    PrefixLm(TrainConfig),
    Clf(ClfConfig),
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection::PrefixLm(TrainConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub manifest: Option<PathBuf>,
    pub clip: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            manifest: None,
            clip: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub corpus: CorpusSpec,
    /// Auxiliary text-only corpus mixed into training (modality dropout).
    pub text_only: Option<CorpusSpec>,
    pub model: FusionConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            corpus: CorpusSpec::default(),
            text_only: None,
            model: FusionConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        if let Some(t) = &self.text_only {
            t.validate()?;
            if !self.model.modalities.text {
                return Err(Error::Config(
                    "a text-only corpus needs a model with the text modality".into(),
                ));
            }
            if t.split == self.corpus.split {
                return Err(Error::validation("text_only.split", "must differ from corpus.split"));
            }
        }
        match &self.train {
            TrainSection::PrefixLm(t) => t.validate()?,
            TrainSection::Clf(c) => c.validate()?,
        }
        if !(self.eval.clip > 0.0 && self.eval.clip <= 1.0) {
            return Err(Error::validation("eval.clip", "must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub const PRESET_NAMES: [&str; 8] = [
    "clf",
    "um-text",
    "um-text+500k",
    "um-ds",
    "um-audio",
    "mm-text+audio",
    "mm-all",
    "mm-all+lora",
];

/// Split name of the auxiliary text-only corpus.
pub const TEXT_ONLY_SPLIT: &str = "textonly";

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let lm_train = TrainSection::PrefixLm(TrainConfig::default());
    let with = |mods: ModalitySet, train: TrainSection, lora: Option<LoraConfig>| ExperimentConfig {
        name: name.to_string(),
        model: FusionConfig {
            modalities: mods,
            lora,
            ..FusionConfig::default()
        },
        train,
        ..ExperimentConfig::default()
    };
    let text_audio = ModalitySet::new(true, true, false)?;
    Ok(match name {
        "clf" => with(ModalitySet::AUDIO, TrainSection::Clf(ClfConfig::default()), None),
        "um-text" => with(ModalitySet::TEXT, lm_train, None),
        "um-text+500k" => {
            // Half the multimodal count, the default mixing ratio.
            let base = CorpusSpec::default();
            ExperimentConfig {
                text_only: Some(CorpusSpec {
                    n_directed: base.n_directed / 2,
                    n_non_directed: base.n_non_directed / 2,
                    split: TEXT_ONLY_SPLIT.into(),
                    ..base
                }),
                ..with(ModalitySet::TEXT, lm_train, None)
            }
        }
        "um-ds" => with(ModalitySet::DS, lm_train, None),
        "um-audio" => with(ModalitySet::AUDIO, lm_train, None),
        "mm-text+audio" => with(text_audio, lm_train, None),
        "mm-all" => with(ModalitySet::ALL, lm_train, None),
        "mm-all+lora" => with(ModalitySet::ALL, lm_train, Some(LoraConfig::default())),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}
