//! Binary parameter container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (version, op-set hash, caller metadata, tensor names and shapes),
//! then every tensor's values as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::RealArray;
use crate::error::{NumError, Result};
use crate::graph::OP_SET;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"NKCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Hash of the registered op names; a checkpoint written under a different op
/// set is refused.
pub fn op_set_hash() -> String {
    let mut h = Sha256::new();
    for op in OP_SET {
        h.update(op.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    op_set_hash: String,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamSet,
}

pub fn encode(params: &ParamSet, meta: &BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        op_set_hash: op_set_hash(),
        meta: meta.clone(),
        tensors: params
            .iter()
            .map(|(name, a)| TensorEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let hbytes = serde_json::to_vec(&header).map_err(|e| NumError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + hbytes.len() + 8 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&hbytes);
    for (_, a) in params.iter() {
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |what: &str| NumError::Checkpoint(format!("corrupt checkpoint: {what}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(NumError::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).ok_or_else(|| corrupt("truncated"))?;
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(NumError::Checkpoint(format!(
            "header format version {} does not match {FORMAT_VERSION}",
            header.format_version
        )));
    }
    if header.op_set_hash != op_set_hash() {
        return Err(NumError::Checkpoint(format!(
            "op-set hash {} does not match this build ({})",
            header.op_set_hash,
            op_set_hash()
        )));
    }
    let mut values = &body[hlen..];
    let mut params = ParamSet::new();
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        if values.len() < 8 * n {
            return Err(corrupt("truncated values"));
        }
        let data: Vec<f64> = values[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values = &values[8 * n..];
        let arr = RealArray::new(t.shape, data).map_err(|e| corrupt(&e.to_string()))?;
        if params.insert(t.name.clone(), arr).is_some() {
            return Err(corrupt(&format!("duplicate tensor {}", t.name)));
        }
    }
    if !values.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        meta: header.meta,
        params,
    })
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    meta: &BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let bytes = encode(params, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
