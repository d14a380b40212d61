//! Checkpoint directories: `manifest.json` plus a `weights.bin` blob of
//! little-endian f32 values.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: BTreeMap<String, TensorEntry>,
    metadata: serde_json::Value,
}

/// An in-memory checkpoint. Tensor names are kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata,
        }
    }

    pub fn insert_tensor(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let data = tensor.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        self.insert(name, tensor.dims().to_vec(), data)
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "tensor `{name}`: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        self.tensors.insert(name.to_string(), StoredTensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CoreError::MissingTensor(name.to_string()))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    offset,
                    nbytes: blob.len() as u64 - offset,
                },
            );
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::json(dir, e))?;
        write_atomic(&dir.join(BLOB_FILE), &blob)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| CoreError::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CoreError::CorruptCheckpoint(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CoreError::CorruptCheckpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let blob_path = dir.join(BLOB_FILE);
        let blob = std::fs::read(&blob_path).map_err(|e| CoreError::io(&blob_path, e))?;
        validate_layout(&manifest.tensors, blob.len() as u64)?;

        let mut tensors = BTreeMap::new();
        for (name, entry) in manifest.tensors {
            let bytes = &blob[entry.offset as usize..(entry.offset + entry.nbytes) as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(
                name,
                StoredTensor {
                    shape: entry.shape,
                    data,
                },
            );
        }
        Ok(Self {
            tensors,
            metadata: manifest.metadata,
        })
    }
}

fn validate_layout(entries: &BTreeMap<String, TensorEntry>, blob_len: u64) -> Result<()> {
    let mut spans = Vec::with_capacity(entries.len());
    for (name, e) in entries {
        if e.dtype != "f32" {
            return Err(CoreError::CorruptCheckpoint(format!(
                "tensor `{name}` has dtype {}",
                e.dtype
            )));
        }
        let expected = 4 * e.shape.iter().product::<usize>() as u64;
        if e.nbytes != expected {
            return Err(CoreError::CorruptCheckpoint(format!(
                "tensor `{name}`: {} bytes recorded, shape {:?} needs {expected}",
                e.nbytes, e.shape
            )));
        }
        let end = e
            .offset
            .checked_add(e.nbytes)
            .ok_or_else(|| CoreError::CorruptCheckpoint(format!("tensor `{name}`: offset overflow")))?;
        if end > blob_len {
            return Err(CoreError::CorruptCheckpoint(format!(
                "tensor `{name}` ends at byte {end} but the blob holds {blob_len}"
            )));
        }
        spans.push((e.offset, end, name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(CoreError::CorruptCheckpoint(format!(
                "tensors `{}` and `{}` overlap",
                w[0].2, w[1].2
            )));
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CoreError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}
