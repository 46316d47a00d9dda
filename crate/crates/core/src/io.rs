//! On-disk formats: the binary feature/embedding matrix, the corpus manifest,
//! and small JSON helpers.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! magic  "CHNS"      4 bytes
//! version u32 = 1
//! count   u64
//! dim     u32
//! count * dim f32, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::corpus::{Corpus, CorpusManifest};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CHNS";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// Encodes a matrix in the feature file layout. Values are narrowed to f32.
pub fn encode_features(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for &x in m.iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("size overflow"))?;
    if body.len() != expected {
        return Err(bad(&format!(
            "expected {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((count, dim), values).map_err(|e| bad(&e.to_string()))
}

pub fn write_features(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Loads a manifest + feature file pair into a [`Corpus`].
pub fn load_corpus(manifest: &Path, features: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest = read_json(manifest)?;
    let features = read_features(features)?;
    Corpus::new(manifest, features)
}

pub fn save_corpus(corpus: &Corpus, manifest: &Path, features: &Path) -> Result<()> {
    write_json(manifest, corpus.manifest())?;
    write_features(features, corpus.features())
}
