//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       5     magic "GAPS1"
//! 5       4     u32 format version (currently 1)
//! 9       8     u64 header length H in bytes
//! 17      H     UTF-8 JSON header
//! 17+H    4*N   f32 tensor data, row-major, in header order
//! ```
//!
//! The header is
//! `{"config": {...}, "registry": {...}, "vocab": [...], "tensors": [{"name", "shape": [r, c], "offset"}]}`
//! where `offset` counts f32 values from the start of the data block.
//! For a model whose only tensor is a 1x2 `w`, the data block is the 8 bytes
//! `00 00 80 3f 00 00 00 c0` for `[1.0, -2.0]`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::TextVocab;
use crate::model::{ModelConfig, ModelError, ModelState};
use crate::numerics::Tensor;
use crate::registry::{DslRegistry, RegistryDoc, RegistryError};

pub const MAGIC: &[u8; 5] = b"GAPS1";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 5 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor `{name}`: {reason}")]
    CorruptTensor { name: String, reason: String },
    #[error("tensor `{0}` holds non-finite values")]
    NonFinite(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    registry: RegistryDoc,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(state: &ModelState) -> Result<Vec<u8>, CheckpointError> {
    let mut tensors = Vec::with_capacity(state.params.len());
    let mut offset = 0;
    for (name, t) in state.params.iter() {
        if !t.is_finite() {
            return Err(CheckpointError::NonFinite(name.to_string()));
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            offset,
        });
        offset += t.len();
    }
    let header = Header {
        config: state.config.clone(),
        registry: state.registry.doc().clone(),
        vocab: state.vocab.tokens().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");

    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in state.params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelState, CheckpointError> {
    decode(bytes, None)
}

/// Loads the tensors into a model built from `config` instead of the config
/// stored in the header; shapes that disagree are reported by name.
pub fn checkpoint_from_bytes_as(bytes: &[u8], config: ModelConfig) -> Result<ModelState, CheckpointError> {
    decode(bytes, Some(config))
}

fn decode(bytes: &[u8], config: Option<ModelConfig>) -> Result<ModelState, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Header("file ends inside the preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let data_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| CheckpointError::Header("file ends inside the header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..data_start]).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let data = &bytes[data_start..];
    if data.len() % 4 != 0 {
        return Err(CheckpointError::CorruptTensor {
            name: header.tensors.last().map(|t| t.name.clone()).unwrap_or_default(),
            reason: format!("data block of {} bytes is not a whole number of f32 values", data.len()),
        });
    }
    let floats = data.len() / 4;
    let mut expected_end = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let corrupt = |reason: String| CheckpointError::CorruptTensor {
            name: entry.name.clone(),
            reason,
        };
        if tensors.iter().any(|(n, _): &(String, Tensor)| *n == entry.name) {
            return Err(corrupt("duplicate name".into()));
        }
        let [r, c] = entry.shape;
        let len = r * c;
        if entry.offset != expected_end {
            return Err(corrupt(format!("offset {} where {} was expected", entry.offset, expected_end)));
        }
        if entry.offset + len > floats {
            return Err(corrupt(format!(
                "needs values {}..{} but the data block holds {}",
                entry.offset,
                entry.offset + len,
                floats
            )));
        }
        let values = data[4 * entry.offset..4 * (entry.offset + len)]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::from_vec(r, c, values).map_err(|e| corrupt(e.to_string()))?;
        expected_end += len;
        tensors.push((entry.name.clone(), t));
    }
    if expected_end != floats {
        return Err(CheckpointError::CorruptTensor {
            name: header.tensors.last().map(|t| t.name.clone()).unwrap_or_default(),
            reason: format!("{} trailing values after the last tensor", floats - expected_end),
        });
    }

    let registry = DslRegistry::build(header.registry)?;
    let vocab = TextVocab::from_tokens(header.vocab);
    let config = config.unwrap_or(header.config);
    Ok(ModelState::from_tensors(config, registry, vocab, tensors)?)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(state)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}
