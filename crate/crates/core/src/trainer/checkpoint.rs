//! Checkpoint files: the magic `SIMVTP1`, a little-endian `u64` header
//! length, a JSON header (model config and tensor manifest), then every
//! tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::first_difference;
use crate::model::{ModelConfig, ModelState};
use crate::numerics::Array;
use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"SIMVTP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let mut offset = 0;
    let tensors = state
        .names()
        .iter()
        .zip(&state.params)
        .map(|(name, p)| {
            let e = TensorEntry { name: name.clone(), shape: p.shape().to_vec(), offset };
            offset += p.len() * 4;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { config: state.config.clone(), tensors }).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &state.params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    // Write then rename, so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(state)).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

/// Parses a checkpoint. With `expected`, the embedded config must match it
/// exactly; the error names the first differing field.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>, path: &Path) -> Result<ModelState> {
    let corrupt = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing SIMVTP1 magic (not a checkpoint or unsupported version)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes")) as usize;
    let body = &bytes[15..];
    if hlen > body.len() {
        return Err(corrupt(format!("truncated header: {hlen} bytes declared, {} present", body.len())));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if let Some(want) = expected {
        let (a, b) = (serde_json::to_value(want).expect("config"), serde_json::to_value(&header.config).expect("config"));
        if let Some(field) = first_difference(&a, &b, "") {
            return Err(corrupt(format!("config mismatch in field `model.{field}`")));
        }
    }
    let payload = &body[hlen..];
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != total {
        return Err(corrupt(format!("payload is {} bytes, manifest needs {total}", payload.len())));
    }
    let mut named = Vec::with_capacity(header.tensors.len());
    let mut cursor = 0;
    for t in &header.tensors {
        let n = t.shape.iter().product::<usize>() * 4;
        if t.offset != cursor {
            return Err(corrupt(format!("tensor {} at offset {}, expected {cursor}", t.name, t.offset)));
        }
        let data = payload[cursor..cursor + n].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let arr = Array::new(t.shape.clone(), data).map_err(|e| corrupt(e.to_string()))?;
        named.push((t.name.clone(), arr));
        cursor += n;
    }
    ModelState::from_parts(header.config, named).map_err(|e| corrupt(format!("manifest mismatch: {e}")))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    from_bytes(&bytes, expected, path)
}
