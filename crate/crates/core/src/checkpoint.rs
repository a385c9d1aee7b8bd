//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "RTXGCKPT"
//! offset 8   u32       format version (1)
//! offset 12  u32       header length L
//! offset 16  L bytes   UTF-8 JSON header:
//!                      { "metadata": { "architecture", "seed", "iterations", "config" },
//!                        "tensors": [ { "name", "shape" }, ... ] }
//! then       payloads  one f32 LE block per tensor, in header order,
//!                      product(shape) values each, no padding
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! reader never observes a partially written checkpoint.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RTXGCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub seed: u64,
    pub iterations: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: CheckpointMeta, params: ParamSet<T>) -> Self {
        Self { meta, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            metadata: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.params.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing magic number".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let hdr = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(hdr).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut pos = 16 + hlen;
        let mut params = ParamSet::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let need = n * 4;
            let chunk = bytes.get(pos..pos + need).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated payload for tensor `{}`: need {need} bytes, {} available",
                    entry.name,
                    bytes.len().saturating_sub(pos)
                ))
            })?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| T::lit(f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))))
                .collect();
            params.insert(entry.name, Tensor::from_vec(&entry.shape, data)?);
            pos += need;
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - pos
            )));
        }
        Ok(Self {
            meta: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("checkpoint {} does not exist", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes)
    }

    /// Tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (k, v) in self.params.iter() {
            if k.starts_with(prefix) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }
}

/// Writes `bytes` to a temporary sibling, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
