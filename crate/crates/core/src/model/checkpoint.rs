//! Self-describing binary checkpoint.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "BSELCKP1" | u32 version | u64 n | n bytes of JSON header
//! u32 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims…, f64 values…
//! ```
//!
//! The JSON header carries the model config, the feature normalizer and
//! free-form provenance, so evaluation needs nothing but this file.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params};
use crate::features::NormStats;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"BSELCKP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub norm: NormStats,
    pub config_hash: String,
    pub dataset_hash: String,
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let shapes = self.header.model.layer_shapes();
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (i, (name, values)) in tensors.iter().enumerate() {
            let (fan_in, fan_out) = shapes[i / 2];
            let dims: Vec<u64> = if i % 2 == 0 { vec![fan_in as u64, fan_out as u64] } else { vec![fan_out as u64] };
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in values.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Data("checkpoint is truncated".into()));
            }
            let (head, rest) = r.split_at(n);
            r = rest;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(Error::Data("not a beamsel checkpoint".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(len)?).map_err(|e| Error::Data(format!("bad checkpoint header: {e}")))?;
        header.model.validate()?;
        let mut params = Params::zeros(&header.model);
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::Data(format!("checkpoint has {count} tensors, model needs {}", slots.len())));
        }
        for (expected, slot) in slots.iter_mut() {
            let name_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = std::str::from_utf8(take(name_len)?).map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
            if name != expected {
                return Err(Error::Data(format!("expected tensor {expected}, found {name}")));
            }
            let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let mut numel = 1usize;
            for _ in 0..rank {
                numel *= u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            }
            if numel != slot.len() {
                return Err(Error::Data(format!("tensor {name} has {numel} values, expected {}", slot.len())));
            }
            for v in slot.iter_mut() {
                *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            }
        }
        drop(slots);
        if !r.is_empty() {
            return Err(Error::Data("trailing bytes after last tensor".into()));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
