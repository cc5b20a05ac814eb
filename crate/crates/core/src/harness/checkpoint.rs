//! Binary checkpoint format.
//!
//! ```text
//! "ECHO" | version: u32 LE | header_len: u64 LE | header JSON | payload
//! ```
//!
//! The header holds the model config, the mode (`baseline` or `echo`) and a
//! manifest of `{name, dtype, shape, offset, length}` entries whose byte
//! ranges tile the payload contiguously in parameter order. Scalars are
//! little-endian `f32` or `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, EchoError, Result};
use crate::model::{EchoModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"ECHO";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Echo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub mode: Mode,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &EchoModel, dtype: Dtype) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for p in model.params() {
        let offset = payload.len();
        for &v in p.value.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            dtype,
            shape: p.value.shape().to_vec(),
            offset,
            length: payload.len() - offset,
        });
    }
    let mode = if model.is_baseline() {
        Mode::Baseline
    } else {
        Mode::Echo
    };
    let header = Header {
        config: model.config.clone(),
        mode,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn take(bytes: &[u8], from: usize, n: usize) -> std::result::Result<&[u8], CheckpointError> {
    let end = from.checked_add(n).ok_or(CheckpointError::Truncated {
        needed: usize::MAX,
        found: bytes.len(),
    })?;
    bytes.get(from..end).ok_or(CheckpointError::Truncated {
        needed: end,
        found: bytes.len(),
    })
}

/// Parses and validates the preamble and header, returning the header and
/// the payload slice.
pub fn read_header(bytes: &[u8]) -> std::result::Result<(Header, &[u8]), CheckpointError> {
    let magic: [u8; 4] = take(bytes, 0, 4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Truncated {
        needed: usize::MAX,
        found: bytes.len(),
    })?;
    let json = take(bytes, PREAMBLE, header_len)?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, &bytes[PREAMBLE + header_len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<EchoModel> {
    let (header, payload) = read_header(bytes)?;
    let manifest = |m: String| EchoError::Checkpoint(CheckpointError::Manifest(m));
    let expected_mode = if header.config.is_baseline() {
        Mode::Baseline
    } else {
        Mode::Echo
    };
    if header.mode != expected_mode {
        return Err(manifest(format!(
            "mode {:?} disagrees with the config",
            header.mode
        )));
    }
    // Build the structure without sampling weights, then fill from the payload.
    let mut config = header.config.clone();
    config.init_std = 0.0;
    let mut model = EchoModel::init(config)?;
    model.config.init_std = header.config.init_std;
    let params = model.params_mut();
    if params.len() != header.tensors.len() {
        return Err(manifest(format!(
            "{} tensors listed, model has {}",
            header.tensors.len(),
            params.len()
        )));
    }
    let mut cursor = 0;
    for (p, entry) in params.into_iter().zip(&header.tensors) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            return Err(manifest(format!(
                "entry `{}` {:?} where `{}` {:?} was expected",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        if entry.offset != cursor || entry.length != p.numel() * entry.dtype.size() {
            return Err(manifest(format!(
                "entry `{}` has a non-contiguous byte range",
                entry.name
            )));
        }
        let raw =
            take(payload, entry.offset, entry.length).map_err(|_| CheckpointError::Truncated {
                needed: bytes.len() - payload.len() + entry.offset + entry.length,
                found: bytes.len(),
            })?;
        let data = p.value.data_mut();
        match entry.dtype {
            Dtype::F32 => {
                for (v, c) in data.iter_mut().zip(raw.chunks_exact(4)) {
                    *v = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
                }
            }
            Dtype::F64 => {
                for (v, c) in data.iter_mut().zip(raw.chunks_exact(8)) {
                    *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
                }
            }
        }
        cursor += entry.length;
    }
    if cursor != payload.len() {
        return Err(manifest(format!(
            "{} trailing payload bytes",
            payload.len() - cursor
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &EchoModel, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    fs::write(path, to_bytes(model, dtype))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EchoModel> {
    from_bytes(&fs::read(path)?)
}
