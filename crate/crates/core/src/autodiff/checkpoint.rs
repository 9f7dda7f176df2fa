//! Checkpoint file layout:
//!
//! ```text
//! 8 bytes   magic "DFRGCKPT"
//! 8 bytes   manifest length M, little-endian u64
//! M bytes   JSON manifest {format_version, step, hyperparameters, tensors: [{name, shape}]}
//! payload   every tensor as little-endian f32, in manifest order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::network::{NamedTensor, NetworkParameters};
use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DFRGCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub hyperparameters: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParameters,
    pub step: u64,
    pub hyperparameters: BTreeMap<String, f64>,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: ckpt.step,
        hyperparameters: ckpt.hyperparameters.clone(),
        tensors: ckpt.params.tensors.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.tensor.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * ckpt.params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &ckpt.params.tensors {
        for &v in &t.tensor.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = LittleEndian::read_u64(&bytes[8..16]) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", manifest.format_version)));
    }
    let mut offset = 16 + len;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad(&format!("truncated payload for {}", entry.name)))?;
        let data = raw.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect();
        tensors.push(NamedTensor { name: entry.name.clone(), tensor: Tensor::new(entry.shape.clone(), data) });
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Checkpoint { params: NetworkParameters { tensors }, step: manifest.step, hyperparameters: manifest.hyperparameters })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    crate::io::atomic_write(path, &encode(ckpt)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    decode(&std::fs::read(path)?)
}
