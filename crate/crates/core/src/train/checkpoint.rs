//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    8 bytes  "DATQA1\0\0"
//! version  u32
//! len      u64, then `len` bytes of UTF-8 JSON header
//! arrays   repeated: u16 name length, name, u8 rank, rank x u64 dims, f64 data
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochLosses, TrainConfig};
use crate::autodiff::Array;
use crate::domains::DomainAssignment;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DATQA1\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Summary of the labelling a model was trained against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMeta {
    pub strategy: String,
    pub num_domains: usize,
    pub lambda: f64,
    pub label_names: Vec<String>,
    pub centroid_hash: Option<String>,
}

impl DomainMeta {
    pub fn new(assignment: &DomainAssignment, lambda: f64) -> Self {
        Self {
            strategy: assignment.strategy.clone(),
            num_domains: assignment.num_domains,
            lambda,
            label_names: assignment.label_names.clone(),
            centroid_hash: assignment.centroid_hash(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochLosses>,
    pub domain: DomainMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    best_epoch: usize,
    history: Vec<EpochLosses>,
    domain: DomainMeta,
    array_count: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.params.named();
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            best_epoch: self.best_epoch,
            history: self.history.clone(),
            domain: self.domain.clone(),
            array_count: named.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, array) in named {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("array name `{name}` too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(array.rank() as u8);
            for &d in array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in array.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 8] = r.take(8, "magic")?.try_into().expect("8 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u64("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)?;
        let mut arrays = Vec::with_capacity(header.array_count);
        while !r.done() {
            let name_len = u16::from_le_bytes(r.take(2, "array name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len, "array name")?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "array rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u64("array dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let count = count.ok_or_else(|| Error::Checkpoint(format!("array `{name}` dims overflow")))?;
            let raw = r.take(count.checked_mul(8).ok_or(Error::Truncated("array data"))?, "array data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push((name, Array::new(shape, data)?));
        }
        if arrays.len() != header.array_count {
            return Err(Error::ArrayCount {
                expected: header.array_count,
                found: arrays.len(),
            });
        }
        let params = ModelParams::from_named(&header.model, arrays)?;
        Ok(Self {
            model: header.model,
            train: header.train,
            params,
            best_epoch: header.best_epoch,
            history: header.history,
            domain: header.domain,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
