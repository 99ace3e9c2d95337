//! Named-tensor inventory and its on-disk container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic  b"C3DATENS"
//! bytes 8..16   u64    header length H
//! bytes 16..16+H       UTF-8 JSON header
//! bytes 16+H..         payload, tensors back to back in manifest order
//! ```
//!
//! The header is `{"version":1,"meta":<any JSON>,"tensors":[{"name","shape":[rows,cols],
//! "dtype":"f32"|"f64","offset","nbytes"}]}` where `offset` is relative to the
//! start of the payload. Matrices are stored row-major.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"C3DATENS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: DType,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

/// Ordered collection of uniquely named matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate tensor name `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// Manifest as it would be written with `dtype`.
    pub fn manifest(&self, dtype: DType) -> Vec<TensorInfo> {
        let mut offset = 0;
        self.iter()
            .map(|(name, t)| {
                let nbytes = t.len() * dtype.width();
                let info = TensorInfo {
                    name: name.to_string(),
                    shape: [t.nrows(), t.ncols()],
                    dtype,
                    offset,
                    nbytes,
                };
                offset += nbytes;
                info
            })
            .collect()
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if self.tensors[id].dim() != t.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` shape {:?} does not match {:?}",
                    t.dim(),
                    self.tensors[id].dim()
                )));
            }
            self.tensors[id].assign(t);
        }
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, expected {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(store: &ParamStore, meta: serde_json::Value, dtype: DType) -> Result<Vec<u8>> {
    let header = Header {
        version: 1,
        meta,
        tensors: store.manifest(dtype),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload_len: usize = header.tensors.iter().map(|t| t.nbytes).sum();
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in store.iter() {
        for &v in t.iter() {
            match dtype {
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let payload = &bytes[header_end..];
    let mut store = ParamStore::new();
    for info in header.tensors {
        let [rows, cols] = info.shape;
        let width = info.dtype.width();
        if info.nbytes != rows * cols * width || info.offset + info.nbytes > payload.len() {
            return Err(Error::Checkpoint(format!("bad extent for tensor `{}`", info.name)));
        }
        let raw = &payload[info.offset..info.offset + info.nbytes];
        let values: Vec<f64> = match info.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let m = Mat::from_shape_vec((rows, cols), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.insert(info.name, m)?;
    }
    Ok((store, header.meta))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    meta: serde_json::Value,
    dtype: DType,
) -> Result<()> {
    fs::write(path, encode_checkpoint(store, meta, dtype)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value)> {
    decode_checkpoint(&fs::read(path)?)
}
