//! Named-tensor archive.
//!
//! Layout: the 8-byte magic `CGRNTA01`, a little-endian `u64` manifest
//! length, a UTF-8 JSON manifest `{"tensors": [{"name", "shape"}], "meta"}`,
//! then every tensor's values as little-endian `f64`, in manifest order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 8] = b"CGRNTA01";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive i/o: {0}")]
    Io(#[from] io::Error),
    #[error("archive manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("malformed archive: {0}")]
    Format(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Tensors in insertion order plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ArchiveError> {
        let manifest = Manifest {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ArchiveError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ArchiveError::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|_| ArchiveError::Format(format!("payload of '{}' truncated", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| ArchiveError::Format(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}
