//! Checkpoint files: `MXCK`, u16 version, u32 header length, a UTF-8 JSON
//! header naming every tensor with its shape and byte offset, then the raw
//! little-endian `f64` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::autodiff::{Adam, AdamConfig, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const PREFIX_LEN: usize = 10;
const FIRST_MOMENT: &str = "adam.first/";
const SECOND_MOMENT: &str = "adam.second/";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupted header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` missing from checkpoint")]
    Missing(String),
    #[error("checkpoint holds unknown tensor `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerHeader>,
    /// Free-form training state (step, stage, scheduler).
    pub meta: serde_json::Value,
}

impl CheckpointHeader {
    pub fn payload_len(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum()
    }
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
    pub meta: serde_json::Value,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optimizer: Option<&Adam>,
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let store = model.params();
    let mut tensors: Vec<(String, &[usize], &[f64])> = store
        .ids()
        .map(|id| (store.name(id).to_string(), store.value(id).shape(), store.value(id).data()))
        .collect();
    if let Some(opt) = optimizer {
        for (prefix, moments) in [(FIRST_MOMENT, opt.first_moments()), (SECOND_MOMENT, opt.second_moments())] {
            for id in store.ids() {
                tensors.push((
                    format!("{prefix}{}", store.name(id)),
                    store.value(id).shape(),
                    &moments[id.index()],
                ));
            }
        }
    }
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, shape, data)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: shape.to_vec(),
                offset,
            };
            offset += data.len() * 8;
            e
        })
        .collect();
    let header = CheckpointHeader {
        model_config: *model.config(),
        tensors: entries,
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config,
            steps: o.steps_taken(),
        }),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(PREFIX_LEN + json.len() + offset);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("mxck.tmp");
    fs::write(&tmp, &bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), CheckpointError> {
    if bytes.len() < PREFIX_LEN {
        return Err(CheckpointError::Truncated {
            expected: PREFIX_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let end = PREFIX_LEN + len;
    if bytes.len() < end {
        return Err(CheckpointError::Header(format!(
            "declared {len} header bytes but file has {}",
            bytes.len() - PREFIX_LEN
        )));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[PREFIX_LEN..end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut expected_offset = 0;
    for t in &header.tensors {
        if t.offset != expected_offset {
            return Err(CheckpointError::Header(format!(
                "tensor `{}` at offset {} (expected {expected_offset})",
                t.name, t.offset
            )));
        }
        expected_offset += t.shape.iter().product::<usize>() * 8;
    }
    Ok((header, end))
}

/// Reads only the header; returns it with the payload's starting byte.
pub fn read_checkpoint_header(path: &Path) -> Result<(CheckpointHeader, usize), CheckpointError> {
    let bytes = fs::read(path).map_err(io(path))?;
    parse_header(&bytes)
}

/// Loads a checkpoint, validating every tensor against the model layout
/// implied by the stored config before anything is returned.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(io(path))?;
    let (header, start) = parse_header(&bytes)?;
    let expected = start + header.payload_len();
    if bytes.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[start..];
    let read = |e: &TensorEntry| -> Vec<f64> {
        let n: usize = e.shape.iter().product();
        payload[e.offset..e.offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };

    let mut model = Model::new(header.model_config, 0)?;
    let names: Vec<String> = model.params().ids().map(|id| model.params().name(id).to_string()).collect();
    let lookup = |name: &str| header.tensors.iter().find(|t| t.name == name);
    for t in &header.tensors {
        let base = t
            .name
            .strip_prefix(FIRST_MOMENT)
            .or_else(|| t.name.strip_prefix(SECOND_MOMENT))
            .unwrap_or(&t.name);
        if !names.iter().any(|n| n == base) {
            return Err(CheckpointError::Unknown(t.name.clone()));
        }
    }
    let mut values = Vec::with_capacity(names.len());
    for (id, name) in model.params().ids().zip(&names) {
        let entry = lookup(name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        let want = model.params().value(id).shape();
        if entry.shape != want {
            return Err(CheckpointError::Shape {
                name: name.clone(),
                expected: want.to_vec(),
                found: entry.shape.clone(),
            });
        }
        values.push((id, Tensor::new(entry.shape.clone(), read(entry)).map_err(ModelError::from)?));
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut first = Vec::with_capacity(names.len());
            let mut second = Vec::with_capacity(names.len());
            for (id, name) in model.params().ids().zip(&names) {
                for (prefix, out) in [(FIRST_MOMENT, &mut first), (SECOND_MOMENT, &mut second)] {
                    let full = format!("{prefix}{name}");
                    let entry = lookup(&full).ok_or_else(|| CheckpointError::Missing(full.clone()))?;
                    if entry.shape != model.params().value(id).shape() {
                        return Err(CheckpointError::Shape {
                            name: full,
                            expected: model.params().value(id).shape().to_vec(),
                            found: entry.shape.clone(),
                        });
                    }
                    out.push(read(entry));
                }
            }
            Some((oh, first, second))
        }
    };
    for (id, t) in values {
        model.params_mut().set_value(id, t).map_err(ModelError::from)?;
    }
    let optimizer = optimizer
        .map(|(oh, first, second)| Adam::from_state(oh.config, oh.steps, first, second, model.params()))
        .transpose()
        .map_err(ModelError::from)?;
    Ok(Checkpoint {
        model,
        optimizer,
        meta: header.meta,
    })
}
