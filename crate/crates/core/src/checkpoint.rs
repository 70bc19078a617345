//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "LLINKCKP"
//! 8       4     format version (u32, currently 1)
//! 12      4     header length H in bytes (u32)
//! 16      H     UTF-8 JSON header
//! 16+H    ...   payload: f64 values, row-major, tensor after tensor
//! ```
//!
//! The JSON header carries `kind` (e.g. `"decoder"`, `"projector"`), a free
//! `meta` object (dims, seed, K, scale, config hash...) and the tensor table
//! `[{name, rows, cols, offset}]` where `offset` counts f64 elements into
//! the payload. JSON object keys are sorted, so identical content always
//! serializes to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{Matrix, ParamSet};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LLINKCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub format_version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value, params: ParamSet) -> Self {
        Self {
            kind: kind.into(),
            meta,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, m) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
                offset,
            });
            offset += m.len();
        }
        let header = Header {
            kind: self.kind.clone(),
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in self.params.iter() {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_end = 16 + hlen;
        if bytes.len() < header_end {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];
        let mut params = ParamSet::new();
        for t in &header.tensors {
            let start = (t.offset) * 8;
            let end = start + t.rows * t.cols * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` past end of payload",
                    t.name
                )));
            }
            let values: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::from_shape_vec((t.rows, t.cols), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.insert(t.name.clone(), m);
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the `kind` tag.
    pub fn load_kind(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                ck.kind
            )));
        }
        Ok(ck)
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta field `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}
