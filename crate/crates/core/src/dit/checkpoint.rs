//! Model checkpoint files.
//!
//! Layout (integers little-endian):
//!   magic "DITCKPT1" (8 bytes)
//!   u32 version (= 1)
//!   u32 JSON length, JSON ({config, provenance})
//!   per-tensor records in name order:
//!     u32 name length, name bytes, u32 rank, u32 dims..., f32 data...
//!   u32 CRC-32 (IEEE) of every preceding byte
//!
//! Tensor data is stored single-precision. The richer f64 training-state
//! files used for exact resume share the same container with a different
//! magic and element width (see the trainer module).

use super::{DitConfig, DitParams};
use crate::error::FormatError;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DITCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: DitConfig,
    provenance: serde_json::Value,
}

/// Element width of the stored tensor data.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Elem {
    F32,
    F64,
}

impl Elem {
    fn size(self) -> usize {
        match self {
            Elem::F32 => 4,
            Elem::F64 => 8,
        }
    }
}

pub(crate) fn write_container(
    path: &Path,
    magic: &[u8; 8],
    version: u32,
    json: &[u8],
    tensors: &BTreeMap<String, Tensor>,
    elem: Elem,
) -> Result<(), FormatError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&version.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(json);
    for (name, t) in tensors {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match elem {
            Elem::F32 => {
                for &v in t.data() {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Elem::F64 => {
                for &v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes).map_err(|e| FormatError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub(crate) fn read_container(
    path: &Path,
    magic: &[u8; 8],
    version: u32,
    elem: Elem,
) -> Result<(Vec<u8>, BTreeMap<String, Tensor>), FormatError> {
    let pstr = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| FormatError::Io {
        path: pstr.clone(),
        source: e,
    })?;
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(FormatError::BadMagic {
            path: pstr,
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    if bytes.len() < 20 {
        return Err(FormatError::Truncated {
            path: pstr,
            offset: bytes.len() as u64,
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum {
            path: pstr,
            stored,
            computed,
        });
    }
    let mut off = 8usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], FormatError> {
        if *off + n > body.len() {
            return Err(FormatError::Truncated {
                path: path.display().to_string(),
                offset: *off as u64,
            });
        }
        let s = &body[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let read_u32 = |off: &mut usize| -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };
    let got_version = read_u32(&mut off)?;
    if got_version != version {
        return Err(FormatError::BadVersion {
            path: path.display().to_string(),
            version: got_version,
        });
    }
    let json_len = read_u32(&mut off)? as usize;
    let json = take(&mut off, json_len)?.to_vec();
    let mut tensors = BTreeMap::new();
    while off < body.len() {
        let name_len = read_u32(&mut off)? as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec()).map_err(|_| {
            FormatError::Metadata {
                path: path.display().to_string(),
                reason: "tensor name is not UTF-8".into(),
            }
        })?;
        let rank = read_u32(&mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut off)? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(&mut off, count * elem.size()).map_err(|_| FormatError::Tensor {
            path: path.display().to_string(),
            name: name.clone(),
            reason: format!("data truncated (expected {count} elements)"),
        })?;
        let data: Vec<f64> = match elem {
            Elem::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Elem::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| FormatError::Tensor {
            path: path.display().to_string(),
            name: name.clone(),
            reason: e.to_string(),
        })?;
        tensors.insert(name, tensor);
    }
    Ok((json, tensors))
}

/// Write a model checkpoint. `provenance` is free-form JSON recorded
/// alongside the configuration (training seed, dataset hash, step, ...).
pub fn save_model(
    path: &Path,
    cfg: &DitConfig,
    params: &DitParams,
    provenance: serde_json::Value,
) -> Result<(), FormatError> {
    let meta = CheckpointMeta {
        config: *cfg,
        provenance,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| FormatError::Metadata {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    write_container(
        path,
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &json,
        params.map(),
        Elem::F32,
    )
}

/// Read a model checkpoint, validating every tensor against the shapes the
/// stored configuration implies.
pub fn load_model(path: &Path) -> Result<(DitConfig, DitParams, serde_json::Value), FormatError> {
    let (json, tensors) = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, Elem::F32)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&json).map_err(|e| FormatError::Metadata {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let expected = meta.config.param_shapes();
    for (name, shape) in &expected {
        match tensors.get(name) {
            None => {
                return Err(FormatError::Tensor {
                    path: path.display().to_string(),
                    name: name.clone(),
                    reason: "missing from checkpoint".into(),
                })
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(FormatError::Tensor {
                    path: path.display().to_string(),
                    name: name.clone(),
                    reason: format!("shape {:?} does not match expected {shape:?}", t.shape()),
                })
            }
            _ => {}
        }
    }
    for name in tensors.keys() {
        if !expected.contains_key(name) {
            return Err(FormatError::Tensor {
                path: path.display().to_string(),
                name: name.clone(),
                reason: "not a parameter of the stored configuration".into(),
            });
        }
    }
    Ok((meta.config, DitParams::from_map(tensors), meta.provenance))
}
