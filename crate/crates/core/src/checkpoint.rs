//! DDSD checkpoint files.
//!
//! Layout: magic `DDSD`, u32 LE version, u32 LE header length, a JSON header
//! of that many bytes, then f32 LE tensor payloads in directory order.
//! Offsets in the directory are relative to the end of the header.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clf::ClfModel;
use crate::error::{Error, Result};
use crate::model::{AudioSource, FusionConfig, FusionModel};
use crate::nn::{Module, Param};
use crate::signals::MinMaxScaler;

pub const MAGIC: &[u8; 4] = b"DDSD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Model family, e.g. `fusion` or `clf`.
    pub kind: String,
    pub config: serde_json::Value,
    pub scaler: Option<MinMaxScaler>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A decoded checkpoint with tensors widened back to f64.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Array2<f64>>,
}

/// Serializes every parameter of `module` (in visit order) under `header`.
/// The tensor directory in `header` is rebuilt.
pub fn encode(module: &dyn Module, mut header: CheckpointHeader) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    header.tensors.clear();
    module.visit("", &mut |name, p| {
        header.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.shape(),
            offset: payload.len(),
        });
        for v in p.value.iter() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    });
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("cannot serialize checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint shorter than its preamble".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic (expected DDSD)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    let payload = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0;
    for t in &header.tensors {
        let n = t.shape[0] * t.shape[1];
        if t.offset != expected_offset || t.offset + 4 * n > payload.len() {
            return Err(Error::Format(format!(
                "tensor `{}` lies outside the payload or out of order",
                t.name
            )));
        }
        let data: Vec<f64> = payload[t.offset..t.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push(Array2::from_shape_vec((t.shape[0], t.shape[1]), data).unwrap());
        expected_offset += 4 * n;
    }
    if expected_offset != payload.len() {
        return Err(Error::Format("trailing bytes after tensor payloads".into()));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn write(path: &Path, module: &dyn Module, header: CheckpointHeader) -> Result<()> {
    let bytes = encode(module, header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl Checkpoint {
    /// Copies stored tensors into `module`, matching names and shapes exactly.
    pub fn load_into(&self, module: &mut dyn Module) -> Result<()> {
        let mut idx = 0;
        let mut err = None;
        module.visit_mut("", &mut |name, p: &mut Param| {
            if err.is_some() {
                return;
            }
            match self.header.tensors.get(idx) {
                Some(t) if t.name == name && t.shape == p.shape() => {
                    p.value.assign(&self.tensors[idx]);
                }
                Some(t) => {
                    err = Some(Error::Format(format!(
                        "checkpoint tensor `{}` {:?} does not match model tensor `{name}` {:?}",
                        t.name,
                        t.shape,
                        p.shape()
                    )))
                }
                None => err = Some(Error::Format(format!("checkpoint lacks tensor `{name}`"))),
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {idx}",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

pub const KIND_FUSION: &str = "fusion";
pub const KIND_CLF: &str = "clf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClfHeaderConfig {
    audio: AudioSource,
    hidden_dim: usize,
    seed: u64,
}

/// A model restored from disk together with the metadata stored alongside.
#[derive(Debug, Clone)]
pub enum SavedModel {
    Fusion(FusionModel),
    Clf(ClfModel),
}

pub fn save_fusion(path: &Path, model: &FusionModel, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        kind: KIND_FUSION.into(),
        config: serde_json::to_value(&model.config).expect("config serializes"),
        scaler: Some(model.scaler.clone()),
        tensors: vec![],
        meta,
    };
    write(path, model, header)
}

pub fn save_clf(path: &Path, model: &ClfModel, seed: u64, meta: serde_json::Value) -> Result<()> {
    let config = ClfHeaderConfig {
        audio: model.audio.clone(),
        hidden_dim: model.frame.d_out(),
        seed,
    };
    let header = CheckpointHeader {
        kind: KIND_CLF.into(),
        config: serde_json::to_value(&config).expect("config serializes"),
        scaler: None,
        tensors: vec![],
        meta,
    };
    write(path, model, header)
}

fn config_from<T: serde::de::DeserializeOwned>(ck: &Checkpoint) -> Result<T> {
    serde_json::from_value(ck.header.config.clone())
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))
}

/// Rebuilds the model described by the header and loads its tensors.
pub fn load_model(path: &Path) -> Result<(SavedModel, serde_json::Value)> {
    let ck = read(path)?;
    let model = match ck.header.kind.as_str() {
        KIND_FUSION => {
            let config: FusionConfig = config_from(&ck)?;
            let mut m = FusionModel::new(config)?;
            ck.load_into(&mut m)?;
            if let Some(s) = &ck.header.scaler {
                m.scaler = s.clone();
            }
            SavedModel::Fusion(m)
        }
        KIND_CLF => {
            let c: ClfHeaderConfig = config_from(&ck)?;
            let mut m = ClfModel::new(c.audio, c.hidden_dim, c.seed)?;
            ck.load_into(&mut m)?;
            SavedModel::Clf(m)
        }
        other => return Err(Error::Format(format!("unknown checkpoint kind `{other}`"))),
    };
    Ok((model, ck.header.meta))
}
