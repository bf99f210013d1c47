//! Single-file array container used for checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"EXPLCKPT"
//! 8       4     u32 format version (= 1)
//! 12      8     u64 manifest length L in bytes
//! 20      L     UTF-8 JSON manifest
//! 20+L    ...   payload: raw f64 values, little-endian, row-major
//! ```
//!
//! The manifest is `{"arrays": [{"name", "shape", "dtype", "offset"}...],
//! "meta": <any JSON>}`. `offset` is the byte offset of the array inside the
//! payload (so the absolute position is `20 + L + offset`), `dtype` is always
//! `"f64"`, and every array occupies `8 * product(shape)` bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EXPLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    pub arrays: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let pos = self.arrays.iter().position(|(n, _)| n == name)?;
        Some(self.arrays.remove(pos).1)
    }
}

pub fn encode(arrays: &[(&str, &Tensor)], meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        arrays: entries,
        meta: meta.clone(),
    })
    .map_err(|e| Error::Checkpoint(format!("manifest serialisation: {e}")))?;

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container version {version}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = HEADER_LEN
        .checked_add(mlen)
        .filter(|&p| p <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in manifest.arrays {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "array {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("array {} is truncated", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(Container {
        arrays,
        meta: manifest.meta,
    })
}

pub fn write(path: &Path, arrays: &[(&str, &Tensor)], meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(arrays, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
