use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Audio,
    Ds,
}

/// Non-empty subset of `{text, audio, ds}`. Serialized as a list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Modality>", into = "Vec<Modality>")]
pub struct ModalitySet {
    pub text: bool,
    pub audio: bool,
    pub ds: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet {
        text: true,
        audio: true,
        ds: true,
    };
    pub const TEXT: ModalitySet = ModalitySet {
        text: true,
        audio: false,
        ds: false,
    };
    pub const AUDIO: ModalitySet = ModalitySet {
        text: false,
        audio: true,
        ds: false,
    };
    pub const DS: ModalitySet = ModalitySet {
        text: false,
        audio: false,
        ds: true,
    };

    pub fn new(text: bool, audio: bool, ds: bool) -> Result<Self> {
        if !(text || audio || ds) {
            return Err(Error::validation("modalities", "modality set must be non-empty"));
        }
        Ok(ModalitySet { text, audio, ds })
    }

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Ds => self.ds,
        }
    }

    pub fn to_vec(self) -> Vec<Modality> {
        let mut v = Vec::new();
        if self.text {
            v.push(Modality::Text);
        }
        if self.audio {
            v.push(Modality::Audio);
        }
        if self.ds {
            v.push(Modality::Ds);
        }
        v
    }

    /// Number of prefix tokens this set contributes.
    pub fn prefix_count(&self) -> usize {
        usize::from(self.audio) + usize::from(self.ds)
    }
}

impl TryFrom<Vec<Modality>> for ModalitySet {
    type Error = Error;

    fn try_from(v: Vec<Modality>) -> Result<Self> {
        ModalitySet::new(
            v.contains(&Modality::Text),
            v.contains(&Modality::Audio),
            v.contains(&Modality::Ds),
        )
    }
}

impl From<ModalitySet> for Vec<Modality> {
    fn from(m: ModalitySet) -> Self {
        m.to_vec()
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .to_vec()
            .into_iter()
            .map(|m| match m {
                Modality::Text => "text",
                Modality::Audio => "audio",
                Modality::Ds => "DS",
            })
            .collect();
        write!(f, "{}", names.join("+"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serde_and_display() {
        let json = serde_json::to_string(&ModalitySet::ALL).unwrap();
        assert_eq!(json, r#"["text","audio","ds"]"#);
        let back: ModalitySet = serde_json::from_str(r#"["ds","text"]"#).unwrap();
        assert_eq!(back, ModalitySet::new(true, false, true).unwrap());
        assert!(serde_json::from_str::<ModalitySet>("[]").is_err());
        assert_eq!(ModalitySet::ALL.to_string(), "text+audio+DS");
    }
}
