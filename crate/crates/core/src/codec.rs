//! Binary container shared by checkpoints and dataset files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "PXCL"
//! version  u32
//! json_len u64
//! json     json_len bytes of UTF-8 metadata
//! payload  raw f64 values of every tensor, in metadata order
//! ```
//!
//! The metadata lists each tensor's name and shape; nothing else is needed
//! to locate payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor64;

pub const MAGIC: &[u8; 4] = b"PXCL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Decoded file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor64)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor64) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor64> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format("file truncated before header end"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(format!(
                "bad magic {:?}, expected \"PXCL\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported format version {version} (this build reads version {VERSION})"
            )));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("file truncated inside metadata"))?;
        let header: Header = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| Error::format(format!("corrupt metadata: {e}")))?;
        let mut pos = json_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = pos + n * 8;
            if end > bytes.len() {
                return Err(Error::format(format!(
                    "file truncated inside tensor '{}'",
                    entry.name
                )));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            tensors.push((entry.name, Tensor64::new(entry.shape, data)?));
        }
        if pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - pos
            )));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
