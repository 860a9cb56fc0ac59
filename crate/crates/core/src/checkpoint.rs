//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (kind, config echo, step, tensor index, free-form extras), then the
//! little-endian `f32` blob the index points into.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RELUMECK";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    step: usize,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: usize,
    pub extra: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            step: 0,
            extra: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    /// Appends tensors under `prefix.`.
    pub fn add_tensors(&mut self, prefix: &str, tensors: Vec<NamedTensor>) {
        self.tensors.extend(
            tensors
                .into_iter()
                .map(|(n, s, d)| (format!("{prefix}.{n}"), s, d)),
        );
    }

    /// Tensors stored under `prefix.`, with the prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<NamedTensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, s, d)| {
                n.strip_prefix(&p)
                    .map(|rest| (rest.to_string(), s.clone(), d.clone()))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, shape, data) in &self.tensors {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has inconsistent shape"
                )));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len(),
            });
            offset += data.len();
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            extra: self.extra.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} does not match supported version {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad("header version disagrees with file version"));
        }
        let blob = &bytes[20 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let raw = blob
                .get(4 * e.offset..4 * (e.offset + e.len))
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, e.shape, data));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            step: header.step,
            extra: header.extra,
            tensors,
        })
    }

    /// Writes the file and returns its SHA-256 in hex.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: impl AsRef<Path>, expected_kind: &str) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let ck = Self::from_bytes(&bytes)?;
        if ck.kind != expected_kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} checkpoint, expected {expected_kind}",
                path.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
