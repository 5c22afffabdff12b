//! Named-array container: a JSON header followed by little-endian `f64` data.
//!
//! Layout: 8-byte magic, `u64` header length, UTF-8 JSON header
//! `{schema_version, meta, tensors: [{name, shape, offset}]}`, then the raw
//! values of each tensor in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lift3d_autograd::Array;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"L3DCKPT\0";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) {
        for (k, v) in store.iter() {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn store(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, v) in &self.tensors {
            if let Some(name) = k.strip_prefix(prefix) {
                s.insert(name, v.clone());
            }
        }
        s
    }

    pub fn tensor(&self, name: &str) -> Option<&Array> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, a)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                    offset,
                };
                offset += a.len();
                e
            })
            .collect();
        let header = Header {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            meta: self.meta.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in self.tensors.values() {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?;
        if bytes.len() < body_start {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| Error::format(path, e))?;
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                expected: CHECKPOINT_SCHEMA_VERSION,
                found: header.schema_version,
            });
        }
        let body = &bytes[body_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > body.len() {
                return Err(bad("truncated tensor data"));
            }
            let data = body[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Array::new(&e.shape, data));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
