//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `CELLKDCK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header describing every
//! tensor, then the raw little-endian `f32` payload (parameters first,
//! optimizer state second, both in header order).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StudentModel, UNetSpec};
use crate::optim::{OptimizerConfig, RmsProp};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CELLKDCK";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: UNetSpec,
    /// Number of completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub params: Vec<(String, Vec<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub config: OptimizerConfig,
    pub steps: usize,
    pub state: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: UNetSpec,
    epoch: usize,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimizerConfig,
    steps: usize,
}

impl Checkpoint {
    pub fn capture(model: &StudentModel, epoch: usize, optimizer: Option<&RmsProp>) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            epoch,
            params: model
                .parameters()
                .into_iter()
                .map(|(name, values)| (name, values.to_vec()))
                .collect(),
            optimizer: optimizer.map(|o| OptimizerSnapshot {
                config: o.config,
                steps: o.steps,
                state: o.state.clone(),
            }),
        }
    }

    /// Rebuilds the model (eval mode) with the stored parameters.
    pub fn to_model(&self) -> Result<StudentModel> {
        let mut model = StudentModel::build(self.spec.clone(), 0)?;
        model.load_parameters(&self.params)?;
        Ok(model)
    }

    pub fn to_optimizer(&self) -> Option<RmsProp> {
        self.optimizer.as_ref().map(|o| RmsProp {
            config: o.config,
            state: o.state.clone(),
            steps: o.steps,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.spec.clone(),
            epoch: self.epoch,
            tensors: self
                .params
                .iter()
                .map(|(name, v)| TensorEntry {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                steps: o.steps,
            }),
        };
        if let Some(o) = &self.optimizer {
            if o.state.len() != self.params.len()
                || o.state.iter().zip(&self.params).any(|(s, (_, p))| s.len() != p.len())
            {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let state = self.optimizer.iter().flat_map(|o| o.state.iter());
        for values in self.params.iter().map(|(_, v)| v).chain(state) {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("truncated or corrupt checkpoint ({what})"));
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| corrupt("magic"))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut u32buf = [0u8; 4];
        bytes.read_exact(&mut u32buf).map_err(|_| corrupt("version"))?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut u64buf = [0u8; 8];
        bytes.read_exact(&mut u64buf).map_err(|_| corrupt("header length"))?;
        let header_len = u64::from_le_bytes(u64buf) as usize;
        if bytes.len() < header_len {
            return Err(corrupt("header"));
        }
        let (header_bytes, mut payload) = bytes.split_at(header_len);
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

        let mut read_tensor = |len: usize| -> Result<Vec<f32>> {
            let need = len * 4;
            if payload.len() < need {
                return Err(corrupt("payload"));
            }
            let (chunk, rest) = payload.split_at(need);
            payload = rest;
            Ok(chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            params.push((t.name.clone(), read_tensor(t.len)?));
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut state = Vec::with_capacity(header.tensors.len());
                for t in &header.tensors {
                    state.push(read_tensor(t.len)?);
                }
                Some(OptimizerSnapshot {
                    config: o.config,
                    steps: o.steps,
                    state,
                })
            }
            None => None,
        };
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            spec: header.spec,
            epoch: header.epoch,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
