//! Binary checkpoint container.
//!
//! Layout: magic `BSEGCKPT`, u32 format version, u32 header length, a JSON
//! header, then every tensor and running-moment vector in header order as
//! little-endian IEEE-754 values.

use std::collections::BTreeMap;
use std::path::Path;

use bootseg_autodiff::{DType, Element, RunningStats, Tensor};
use serde::{Deserialize, Serialize};

use super::arch::ArchitectureSpec;
use super::params::ModelParams;
use super::train::TrainHistory;
use crate::error::{Error, Result};
use crate::io;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ArchitectureSpec,
    seed: u64,
    config_hash: String,
    history: TrainHistory,
    tensors: Vec<TensorEntry>,
    /// Running-moment buffers and their channel counts.
    buffers: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub history: TrainHistory,
    pub config_hash: String,
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let header = Header {
            spec: p.spec.clone(),
            seed: p.seed,
            config_hash: self.config_hash.clone(),
            history: self.history.clone(),
            tensors: p
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    dtype: T::DTYPE.code(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            buffers: p.buffers.iter().map(|(k, s)| (k.clone(), s.channels())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in p.tensors.values() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        for s in p.buffers.values() {
            for &v in s.mean.iter().chain(&s.var) {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            what: "checkpoint",
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let mut cursor = 16 + hlen;
        let width = T::DTYPE.size();
        let mut take = |count: usize| -> Result<Vec<T>> {
            let end = cursor + count * width;
            let chunk = bytes
                .get(cursor..end)
                .ok_or_else(|| bad("truncated payload".into()))?;
            cursor = end;
            Ok(chunk.chunks_exact(width).map(T::read_le).collect())
        };
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            if DType::from_code(e.dtype) != Some(T::DTYPE) {
                return Err(bad(format!("tensor {} has dtype code {}, expected {:?}", e.name, e.dtype, T::DTYPE)));
            }
            let data = take(e.shape.iter().product())?;
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
        }
        let mut buffers = BTreeMap::new();
        for (name, c) in &header.buffers {
            let mean = take(*c)?;
            let var = take(*c)?;
            buffers.insert(name.clone(), RunningStats { mean, var });
        }
        if cursor != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        let params = ModelParams {
            spec: header.spec,
            seed: header.seed,
            tensors,
            buffers,
        };
        let expected = super::params::build_model::<T>(&params.spec, 0)?;
        let layout = |p: &ModelParams<T>| -> Vec<(String, Vec<usize>)> {
            p.tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect()
        };
        if layout(&expected) != layout(&params) {
            return Err(bad("tensor layout does not match the stored architecture".into()));
        }
        Ok(Checkpoint {
            params,
            history: header.history,
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read(path)?, path)
    }
}
