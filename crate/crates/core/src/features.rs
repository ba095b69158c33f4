//! `AFEA` binary feature files: magic, version, T, F (all u32 LE after the
//! magic), then T*F little-endian f32 values, frames outermost.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AFEA";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(frames: &Array2<f32>) -> Vec<u8> {
    let (t, f) = frames.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * f);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for v in frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an `AFEA` buffer. Zero-sized headers are accepted here; callers that
/// need `T >= 1` and `F >= 1` check separately.
pub fn decode_features(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "feature file too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected AFEA".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported AFEA version {version}")));
    }
    let t = word(8) as usize;
    let f = word(12) as usize;
    let expected = t
        .checked_mul(f)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload size mismatch: header says {t}x{f} ({expected} bytes total), file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((t, f), data).expect("length checked above"))
}

pub fn write_features(path: &Path, frames: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_features(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// Reads only the 16-byte header and returns `(T, F)`.
pub fn read_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected AFEA".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    Ok((word(8) as usize, word(12) as usize))
}
