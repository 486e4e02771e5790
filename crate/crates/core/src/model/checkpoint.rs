//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `RSLABCKP`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header and
//! then the raw little-endian `f64` payload of every tensor. The header
//! echoes the model configuration and vocabulary, carries free-form
//! metadata and lists each tensor's name, dtype, shape and byte offset
//! into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Model;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"RSLABCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Serializes `model` with `meta` into the container format.
pub fn to_bytes(model: &Model, meta: &Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut payload = Vec::with_capacity(model.params.num_scalars() * 8);
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        vocab: model.vocab.chars(),
        meta: meta.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a container, checking that its tensors match the wiring the
/// stored configuration implies.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Value)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&format!("header: {e}")))?;
    let payload = &bytes[header_end..];
    let vocab = Vocab::from_chars(&header.vocab)?;
    let template = Model::build(header.config.clone(), vocab.clone(), 0)?;

    let mut params = ParamSet::new();
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(bad(&format!("tensor `{}` has unsupported dtype {}", entry.name, entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = n
            .checked_mul(8)
            .and_then(|b| start.checked_add(b))
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| bad(&format!("tensor `{}` runs past the payload", entry.name)))?;
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
    let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
    if expected != found {
        return Err(bad("tensor manifest does not match the stored configuration"));
    }
    Ok((
        Model {
            config: header.config,
            vocab,
            params,
            gate_override: None,
        },
        header.meta,
    ))
}

/// Writes a checkpoint via a temporary sibling file and a rename.
pub fn save(path: &Path, model: &Model, meta: &Value) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
