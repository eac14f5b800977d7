//! Parameter archives: the magic `MMCDCKPT`, a little-endian `u64` header
//! length, a JSON header, then every leaf as little-endian `f32`.

use std::fs;
use std::path::Path;

use mmcd_autograd::{LeafKind, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"MMCDCKPT";

/// Hex SHA-256 of the canonical JSON encoding of a configuration.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let json = serde_json::to_vec(config).expect("configurations serialise");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafKindTag {
    Weight,
    Buffer,
}

impl From<LeafKind> for LeafKindTag {
    fn from(k: LeafKind) -> Self {
        match k {
            LeafKind::Weight => Self::Weight,
            LeafKind::Buffer => Self::Buffer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub kind: LeafKindTag,
    /// Offset into the data section, in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config_hash: String,
    pub model_config: serde_json::Value,
    pub leaves: Vec<LeafRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub data: Vec<f32>,
}

impl Checkpoint {
    /// Captures the leaves of `store` whose names pass `filter`.
    pub fn capture<T: Scalar, C: Serialize>(store: &ParamStore<T>, config: &C, filter: impl Fn(&str) -> bool) -> Self {
        let mut leaves = Vec::new();
        let mut data = Vec::new();
        for (_, leaf) in store.iter().filter(|(_, l)| filter(&l.name)) {
            leaves.push(LeafRecord {
                name: leaf.name.clone(),
                shape: leaf.value.shape().to_vec(),
                frozen: leaf.frozen,
                kind: leaf.kind.into(),
                offset: data.len(),
                len: leaf.value.numel(),
            });
            data.extend(leaf.value.data().iter().map(|v| v.as_f64() as f32));
        }
        let model_config = serde_json::to_value(config).expect("configurations serialise");
        Self { header: Header { config_hash: config_hash(config), model_config, leaves }, data }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::IncompatibleCheckpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        if hlen > body.len() {
            return Err(bad("header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("corrupt header: {e}")))?;
        let raw = &body[hlen..];
        if raw.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values"));
        }
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        for l in &header.leaves {
            if l.shape.iter().product::<usize>() != l.len || l.offset + l.len > data.len() {
                return Err(bad(&format!("leaf {} has inconsistent extent", l.name)));
            }
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn leaf(&self, name: &str) -> Option<(&LeafRecord, &[f32])> {
        self.header.leaves.iter().find(|l| l.name == name).map(|l| (l, &self.data[l.offset..l.offset + l.len]))
    }

    /// Copies every leaf of `store` that passes `filter` from this checkpoint.
    /// The configuration hash and the exact leaf set must match; nothing is
    /// written to `store` unless every check passes. Frozen flags of `store`
    /// are kept.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>, expected_hash: &str, filter: impl Fn(&str) -> bool) -> Result<()> {
        if self.header.config_hash != expected_hash {
            return Err(Error::IncompatibleCheckpoint(format!(
                "configuration hash {} does not match {expected_hash}",
                self.header.config_hash
            )));
        }
        let mut updates = Vec::new();
        for (id, leaf) in store.iter().filter(|(_, l)| filter(&l.name)) {
            let (rec, values) = self
                .leaf(&leaf.name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing leaf {}", leaf.name)))?;
            if rec.shape != leaf.value.shape() {
                return Err(Error::IncompatibleCheckpoint(format!("leaf {} has shape {:?}, expected {:?}", leaf.name, rec.shape, leaf.value.shape())));
            }
            updates.push((id, Tensor::new(rec.shape.clone(), values.iter().map(|&v| T::from_f64(v as f64)).collect())));
        }
        let expected = self.header.leaves.iter().filter(|l| filter(&l.name)).count();
        if expected != updates.len() {
            return Err(Error::IncompatibleCheckpoint(format!("checkpoint holds {expected} leaves, model has {}", updates.len())));
        }
        for (id, value) in updates {
            *store.value_mut(id) = value;
        }
        Ok(())
    }
}

/// SHA-256 over the names and bit patterns of the leaves passing `filter`.
pub fn leaves_digest<T: Scalar>(store: &ParamStore<T>, filter: impl Fn(&mmcd_autograd::Leaf<T>) -> bool) -> String {
    let mut h = Sha256::new();
    for (_, leaf) in store.iter().filter(|(_, l)| filter(l)) {
        h.update(leaf.name.as_bytes());
        for d in leaf.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in leaf.value.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
