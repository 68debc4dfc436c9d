//! Checkpoint files.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (model config, array manifest, free-form metadata), then every array as
//! little-endian `f32` in manifest order. Files are written atomically.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_specs, ModelConfig, Params};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ANAPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A named `f32` array stored next to the parameters (optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Params<f32>,
    pub extra: Vec<NamedArray>,
    pub meta: serde_json::Value,
}

fn header_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: Params<f32>) -> Self {
        Checkpoint {
            model,
            params,
            extra: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn extra(&self, name: &str) -> Option<&NamedArray> {
        self.extra.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::with_capacity(self.params.len() + self.extra.len());
        for s in &self.params.specs {
            arrays.push(ArrayEntry {
                name: s.name.clone(),
                shape: vec![s.rows, s.cols],
            });
        }
        for a in &self.extra {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Shape(format!(
                    "array {} does not match its shape",
                    a.name
                )));
            }
            arrays.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
            });
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            version: CHECKPOINT_VERSION,
            dtype: "f32-le".into(),
            model: self.model.clone(),
            arrays,
            meta: self.meta.clone(),
        })?;
        let payload: usize =
            self.params.count() + self.extra.iter().map(|a| a.data.len()).sum::<usize>();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let data = self
            .params
            .values
            .iter()
            .chain(self.extra.iter().map(|a| &a.data));
        for v in data {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::volume::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(header_err(path, "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(header_err(path, "truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| header_err(path, e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(header_err(
                path,
                format!("unsupported version {}", header.version),
            ));
        }
        header.model.validate()?;
        let payload = &body[hlen..];
        let total: usize = header
            .arrays
            .iter()
            .map(|a| a.shape.iter().product::<usize>())
            .sum();
        if payload.len() != 4 * total {
            return Err(Error::PayloadSize {
                expected: 4 * total,
                found: payload.len(),
            });
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut arrays: Vec<NamedArray> = header
            .arrays
            .iter()
            .map(|a| NamedArray {
                name: a.name.clone(),
                shape: a.shape.clone(),
                data: floats.by_ref().take(a.shape.iter().product()).collect(),
            })
            .collect();

        let specs = param_specs(&header.model)?;
        let mut values = Vec::with_capacity(specs.len());
        for s in &specs {
            let pos = arrays
                .iter()
                .position(|a| a.name == s.name)
                .ok_or_else(|| header_err(path, format!("missing parameter {}", s.name)))?;
            let a = arrays.remove(pos);
            if a.shape != [s.rows, s.cols] {
                return Err(Error::Shape(format!(
                    "parameter {}: stored {:?}, model wants [{}, {}]",
                    s.name, a.shape, s.rows, s.cols
                )));
            }
            values.push(a.data);
        }
        Ok(Checkpoint {
            model: header.model,
            params: Params::from_parts(specs, values)?,
            extra: arrays,
            meta: header.meta,
        })
    }
}
