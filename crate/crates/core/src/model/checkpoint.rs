//! Binary checkpoints.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "CLONE1" | version | meta_len | meta (UTF-8 JSON) | n_records
//! record := name_len | name (UTF-8) | ndim | dims... | f32 data (row-major)
//! ```
//!
//! The metadata names the kind of checkpoint. Adapter checkpoints carry the
//! SHA-256 of the base checkpoint they were trained against.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lora::{LoraAdapter, LoraConfig};
use super::tensor::TensorMap;
use super::transformer::{HParams, ModelParams};
use super::ModelError;
use crate::jsonl::write_atomic;

pub const MAGIC: &[u8; 6] = b"CLONE1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointMeta {
    Model {
        hparams: HParams,
    },
    Adapter {
        lora: LoraConfig,
        n_layers: usize,
        base_checksum: String,
    },
    /// Free-form tensors, e.g. a tagging head.
    Tensors {
        label: String,
    },
}

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(meta: &CheckpointMeta, tensors: &TensorMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + tensors.num_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(meta).expect("metadata serializes");
    put_u32(&mut out, meta.len());
    out.extend_from_slice(&meta);
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 2);
        put_u32(&mut out, t.nrows());
        put_u32(&mut out, t.ncols());
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str, ModelError> {
        std::str::from_utf8(self.take(n)?)
            .map_err(|e| ModelError::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, TensorMap), ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()?;
    let meta: CheckpointMeta = serde_json::from_str(r.utf8(meta_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("bad metadata: {e}")))?;
    let n = r.u32()?;
    let mut tensors = TensorMap::new();
    for _ in 0..n {
        let name_len = r.u32()?;
        let name = r.utf8(name_len)?.to_string();
        let ndim = r.u32()?;
        let dims: Vec<usize> = (0..ndim).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let (rows, cols) = match dims[..] {
            [n] => (1, n),
            [rows, cols] => (rows, cols),
            _ => {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} has unsupported rank {ndim}"
                )))
            }
        };
        let raw = r.take(rows * cols * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        tensors.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok((meta, tensors))
}

fn write(path: &Path, bytes: &[u8]) -> Result<String, ModelError> {
    write_atomic(path, bytes).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(checksum(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>, ModelError> {
    fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Returns the checksum adapters should reference.
pub fn save_model(path: &Path, params: &ModelParams) -> Result<String, ModelError> {
    write(
        path,
        &encode(
            &CheckpointMeta::Model {
                hparams: params.hparams,
            },
            &params.tensors,
        ),
    )
}

pub fn load_model(path: &Path) -> Result<(ModelParams, String), ModelError> {
    let bytes = read(path)?;
    match decode(&bytes)? {
        (CheckpointMeta::Model { hparams }, tensors) => {
            let params = ModelParams { hparams, tensors };
            params.validate()?;
            Ok((params, checksum(&bytes)))
        }
        _ => Err(ModelError::Checkpoint("not a model checkpoint".into())),
    }
}

pub fn save_adapter(
    path: &Path,
    adapter: &LoraAdapter,
    base_checksum: &str,
) -> Result<String, ModelError> {
    write(
        path,
        &encode(
            &CheckpointMeta::Adapter {
                lora: adapter.config.clone(),
                n_layers: adapter.n_layers,
                base_checksum: base_checksum.to_string(),
            },
            &adapter.tensors,
        ),
    )
}

/// Load an adapter, refusing it if it was trained against a different base.
pub fn load_adapter(path: &Path, base_checksum: &str) -> Result<LoraAdapter, ModelError> {
    match decode(&read(path)?)? {
        (
            CheckpointMeta::Adapter {
                lora,
                n_layers,
                base_checksum: recorded,
            },
            tensors,
        ) => {
            if recorded != base_checksum {
                return Err(ModelError::AdapterMismatch(format!(
                    "adapter references base {recorded}, loaded base is {base_checksum}"
                )));
            }
            Ok(LoraAdapter {
                config: lora,
                n_layers,
                tensors,
            })
        }
        _ => Err(ModelError::Checkpoint("not an adapter checkpoint".into())),
    }
}

pub fn save_tensors(path: &Path, label: &str, tensors: &TensorMap) -> Result<String, ModelError> {
    write(
        path,
        &encode(
            &CheckpointMeta::Tensors {
                label: label.to_string(),
            },
            tensors,
        ),
    )
}

pub fn load_tensors(path: &Path) -> Result<TensorMap, ModelError> {
    match decode(&read(path)?)? {
        (CheckpointMeta::Tensors { .. }, tensors) => Ok(tensors),
        _ => Err(ModelError::Checkpoint("not a tensor checkpoint".into())),
    }
}
