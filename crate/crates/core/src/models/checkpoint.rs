//! Versioned checkpoint container.
//!
//! Layout: `AATCKPT` magic, format version (`u32` LE), header length (`u64` LE),
//! JSON header (architecture, parameter names and shapes, training metadata),
//! then every parameter as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, Model, Param};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"AATCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    /// Attack configuration used during training, if any.
    #[serde(default)]
    pub attack: Option<serde_json::Value>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub note: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    params: Vec<(String, Vec<usize>)>,
    meta: TrainingMeta,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &TrainingMeta) -> Result<()> {
    let header = Header {
        arch: model.arch().clone(),
        params: model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(19 + json.len() + 8 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainingMeta)> {
    let bytes = fs::read(path)?;
    let magic_len = CHECKPOINT_MAGIC.len();
    if bytes.len() < magic_len + 12 || &bytes[..magic_len] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing AATCKPT magic"));
    }
    let version = u32::from_le_bytes(bytes[magic_len..magic_len + 4].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[magic_len + 4..magic_len + 12].try_into().expect("8 bytes")) as usize;
    let body_start = magic_len + 12 + hlen;
    if bytes.len() < body_start {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[magic_len + 12..body_start])?;
    let mut offset = body_start;
    let mut params = Vec::with_capacity(header.params.len());
    for (name, shape) in header.params {
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if bytes.len() < end {
            return Err(Error::format(path, format!("truncated parameter blob `{name}`")));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Param {
            name,
            value: Tensor::new(shape, data)?,
        });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameter blobs"));
    }
    Ok((Model::from_params(header.arch, params)?, header.meta))
}
