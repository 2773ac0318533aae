//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the tensors as consecutive little-endian f64 blobs in manifest order.
//! Tensor names are `<group>/<tensor>`, e.g. `policy/layers.0.wq`; a file can
//! hold several parameter sets (policy, reference, optimizer moments).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelDims, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed training steps.
    pub step: u64,
    pub dims: ModelDims,
    /// Free-form run state (optimizer step count, config digest, ...).
    pub meta: serde_json::Value,
    pub groups: BTreeMap<String, ModelParams>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<&ModelParams> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter group `{name}`")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    step: u64,
    dims: ModelDims,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (group, params) in &ckpt.groups {
        if params.dims != ckpt.dims {
            return Err(Error::Checkpoint(format!("group `{group}` has different dimensions")));
        }
        for t in params.tensors() {
            entries.push(TensorEntry {
                name: format!("{group}/{}", t.name),
                shape: t.shape,
                offset: blob.len() as u64,
            });
            for x in t.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        step: ckpt.step,
        dims: ckpt.dims,
        meta: ckpt.meta.clone(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(&tmp, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
    f.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&header).map_err(io)?;
    f.write_all(&blob).map_err(io)?;
    f.into_inner()
        .map_err(|e| Error::io(&tmp, e.into_error()))?
        .sync_all()
        .map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = 8usize
        .checked_add(hlen)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..body]).map_err(|e| bad(e.to_string()))?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema version {}", header.schema_version)));
    }
    header.dims.validate()?;
    let blob = &bytes[body..];

    let mut by_name: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    let mut group_names: Vec<String> = Vec::new();
    for e in &header.tensors {
        let (group, _) = e
            .name
            .split_once('/')
            .ok_or_else(|| bad(format!("tensor name `{}` has no group", e.name)))?;
        if !group_names.iter().any(|g| g == group) {
            group_names.push(group.to_string());
        }
        by_name.insert(&e.name, e);
    }

    let mut groups = BTreeMap::new();
    for group in group_names {
        let mut params = ModelParams::zeros(header.dims);
        for t in params.tensors_mut() {
            let full = format!("{group}/{}", t.name);
            let e = by_name.get(full.as_str()).ok_or_else(|| bad(format!("missing tensor `{full}`")))?;
            if e.shape != t.shape {
                return Err(bad(format!("tensor `{full}` has shape {:?}, expected {:?}", e.shape, t.shape)));
            }
            let start = e.offset as usize;
            let end = start + t.data.len() * 8;
            let src = blob.get(start..end).ok_or_else(|| bad(format!("tensor `{full}` out of bounds")))?;
            for (x, chunk) in t.data.iter_mut().zip(src.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        groups.insert(group, params);
    }
    Ok(Checkpoint {
        step: header.step,
        dims: header.dims,
        meta: header.meta,
        groups,
    })
}
