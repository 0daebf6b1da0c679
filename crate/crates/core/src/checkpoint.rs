//! Tensor container: `u64` little-endian header length, a JSON header, then
//! one flat little-endian blob.
//!
//! ```text
//! {"blob_sha256": "...", "meta": {...},
//!  "tensors": {"name": {"dtype": "F32", "shape": [..], "offsets": [start, end]}}}
//! ```
//!
//! Offsets are byte ranges into the blob, tensors are laid out in name order
//! with no padding, and the blob digest is verified on read. The same layout
//! carries checkpoints and precomputed text embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offsets: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    blob_sha256: String,
    meta: serde_json::Value,
    tensors: BTreeMap<String, Entry>,
}

#[derive(Debug, Clone)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    Ok(match dtype {
        DType::F32 => "F32",
        DType::F64 => "F64",
        DType::U32 => "U32",
        DType::U8 => "U8",
        other => return Err(Error::Integrity(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let t = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U32 => t.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U8 => t.to_vec1::<u8>()?,
        other => return Err(Error::Integrity(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_bytes(dtype: &str, shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let width = match dtype {
        "F32" | "U32" => 4,
        "F64" => 8,
        "U8" => 1,
        other => return Err(Error::Integrity(format!("unknown dtype {other}"))),
    };
    if bytes.len() != n * width {
        return Err(Error::Integrity(format!(
            "tensor of shape {shape:?} needs {} bytes, header gives {}",
            n * width,
            bytes.len()
        )));
    }
    let dev = &Device::Cpu;
    Ok(match dtype {
        "F32" => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        "F64" => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        "U32" => {
            let v: Vec<u32> = bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        _ => Tensor::from_vec(bytes.to_vec(), shape, dev)?,
    })
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t)?;
            let start = blob.len();
            blob.extend_from_slice(&bytes);
            entries.insert(
                name.clone(),
                Entry {
                    dtype: dtype_name(t.dtype())?.to_string(),
                    shape: t.dims().to_vec(),
                    offsets: [start, blob.len()],
                },
            );
        }
        let header = Header {
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Integrity("file shorter than its length prefix".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let json = bytes
            .get(8..8usize.saturating_add(n))
            .ok_or_else(|| Error::Integrity(format!("header length {n} exceeds file size")))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
        let blob = &bytes[8 + n..];
        if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
            return Err(Error::Integrity("tensor blob digest mismatch".into()));
        }
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let [a, b] = e.offsets;
            let slice = blob
                .get(a..b)
                .filter(|_| a <= b)
                .ok_or_else(|| Error::Integrity(format!("tensor {name}: offsets {a}..{b} out of range")))?;
            tensors.insert(name, tensor_from_bytes(&e.dtype, &e.shape, slice)?);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
