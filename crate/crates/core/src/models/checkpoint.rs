//! Binary checkpoint format.
//!
//! ```text
//! b"GSEGCKPT"  u32 version  u64 header_len  header (JSON)  payload (LE f32)
//! ```
//!
//! The header lists every parameter and optimizer buffer with its offset
//! into the payload. A human-readable manifest with the same header is
//! written next to the checkpoint as `<stem>.manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{NdArray, ParamSet};
use crate::optim::OptimizerState;

use super::{ModelError, UNet, UNetConfig};

pub const MAGIC: &[u8; 8] = b"GSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub kind: String,
    pub step: u64,
    pub counters: BTreeMap<String, u64>,
    pub buffers: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: UNetConfig,
    pub params: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerHeader>,
    /// Free-form training metadata (epoch, best validation score, seed).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: UNet,
    pub optimizer: Option<OptimizerState>,
    pub metadata: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Checkpoint {
    pub fn new(model: UNet) -> Self {
        Self {
            model,
            optimizer: None,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn encode(&self) -> Result<(Vec<u8>, CheckpointHeader), ModelError> {
        let mut payload: Vec<f32> = Vec::with_capacity(self.model.param_count());
        let mut params = Vec::new();
        for (name, arr) in self.model.params.iter() {
            params.push(TensorEntry {
                name: name.to_string(),
                shape: arr.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(arr.data());
        }
        let optimizer = self.optimizer.as_ref().map(|s| {
            let buffers = s
                .buffers
                .iter()
                .map(|(name, b)| {
                    let e = TensorEntry {
                        name: name.clone(),
                        shape: vec![b.len()],
                        offset: payload.len(),
                    };
                    payload.extend_from_slice(b);
                    e
                })
                .collect();
            OptimizerHeader {
                kind: s.kind.clone(),
                step: s.step,
                counters: s.counters.clone(),
                buffers,
            }
        });
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            params,
            optimizer,
            metadata: self.metadata.clone(),
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok((out, header))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ModelError::BadCheckpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        let raw = &body[hlen..];
        if !raw.len().is_multiple_of(4) {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let slice = |e: &TensorEntry| -> Result<Vec<f32>, ModelError> {
            let n: usize = e.shape.iter().product();
            payload
                .get(e.offset..e.offset + n)
                .map(<[f32]>::to_vec)
                .ok_or_else(|| {
                    ModelError::BadCheckpoint(format!("tensor {} runs past the payload", e.name))
                })
        };

        let mut params = ParamSet::new();
        for e in &header.params {
            params.insert(e.name.clone(), NdArray::new(e.shape.clone(), slice(e)?)?)?;
        }
        let fresh = header.model.init_params::<f32>(0)?;
        check_compatible(&fresh, &params)?;

        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut buffers = BTreeMap::new();
                for e in &o.buffers {
                    buffers.insert(e.name.clone(), slice(e)?);
                }
                Some(OptimizerState {
                    kind: o.kind.clone(),
                    step: o.step,
                    counters: o.counters.clone(),
                    buffers,
                })
            }
        };
        Ok(Self {
            model: UNet {
                config: header.model,
                params,
            },
            optimizer,
            metadata: header.metadata,
        })
    }

    /// Write the checkpoint and its manifest sidecar.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let (bytes, header) = self.encode()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, bytes).map_err(io_err(path))?;
        let manifest = manifest_path(path);
        let text = serde_json::to_string_pretty(&header)
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        fs::write(&manifest, text).map_err(io_err(&manifest))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes)
    }
}

/// Parameter names and shapes must agree exactly.
pub fn check_compatible(expected: &ParamSet<f32>, found: &ParamSet<f32>) -> Result<(), ModelError> {
    for (name, arr) in expected.iter() {
        match found.get(name) {
            None => {
                return Err(ModelError::CheckpointMismatch(format!(
                    "missing parameter {name}"
                )))
            }
            Some(f) if f.shape() != arr.shape() => {
                return Err(ModelError::CheckpointMismatch(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    f.shape(),
                    arr.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = found.names().find(|n| expected.get(n).is_none()) {
        return Err(ModelError::CheckpointMismatch(format!(
            "unexpected parameter {extra}"
        )));
    }
    Ok(())
}

impl UNet {
    /// Load a checkpoint and check that it was written for `config`.
    pub fn load_for(config: &UNetConfig, path: &Path) -> Result<Self, ModelError> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.model.config.variant != config.variant {
            return Err(ModelError::CheckpointMismatch(format!(
                "checkpoint holds a {:?} network, expected {:?}",
                ckpt.model.config.variant, config.variant
            )));
        }
        check_compatible(&config.init_params(0)?, &ckpt.model.params)?;
        Ok(ckpt.model)
    }
}
