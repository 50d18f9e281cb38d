//! Flat binary parameter checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u64 giving the length of a JSON
//! index, the index itself, then all tensor payloads as little-endian f64.
//! The index records `(name, shape, offset, trainable)` per tensor plus an
//! arbitrary JSON `meta` object for run configuration. Floats round-trip
//! bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TCKPT01\0";

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, counted in f64 elements.
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Index {
    records: Vec<IndexRecord>,
    meta: serde_json::Value,
}

/// Serializes a parameter store (name order) plus metadata to `path`.
pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let mut records = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for (name, p) in store.iter() {
        records.push(IndexRecord {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            trainable: p.trainable,
        });
        offset += p.value.numel();
    }
    let index = Index { records, meta: meta.clone() };
    let index_bytes = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(16 + index_bytes.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&index_bytes);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a checkpoint back into a fresh store plus its metadata object.
pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a parameter checkpoint",
            path.display()
        )));
    }
    let index_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + index_len;
    if bytes.len() < payload_start {
        return Err(Error::Checkpoint("truncated index".into()));
    }
    let index: Index = serde_json::from_slice(&bytes[16..payload_start])?;
    let payload = &bytes[payload_start..];
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64".into()));
    }
    let total = payload.len() / 8;
    let mut store = ParamStore::new();
    for rec in &index.records {
        let numel: usize = rec.shape.iter().product();
        if rec.offset + numel > total {
            return Err(Error::Checkpoint(format!(
                "record {} overruns payload",
                rec.name
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = (rec.offset + i) * 8;
            data.push(f64::from_le_bytes(payload[at..at + 8].try_into().unwrap()));
        }
        store.insert(&rec.name, Tensor::new(rec.shape.clone(), data)?, rec.trainable)?;
    }
    Ok((store, index.meta))
}

/// Convenience for saving loose named tensors (e.g. optimizer state).
pub fn store_from_tensors(tensors: BTreeMap<String, (Tensor, bool)>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, (tensor, trainable)) in tensors {
        store.insert(&name, tensor, trainable)?;
    }
    Ok(store)
}
