//! Versioned binary container for named tensors plus a JSON metadata blob.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MGSNAP\0\0"
//! version    u32
//! checksum   32 bytes SHA-256 of the body
//! body_len   u64
//! body:
//!   meta_len u32, meta (UTF-8 JSON)
//!   count    u32
//!   entries sorted by name:
//!     name_len u32, name, flags u8 (bit 0 = trainable),
//!     ndim u32, dims u64 * ndim, values f64 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MGSNAP\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::Snapshot(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(err("truncated body"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Snapshot {
    pub fn new(meta: serde_json::Value) -> Self {
        Snapshot {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_store(meta: serde_json::Value, store: &ParamStore) -> Self {
        let tensors = store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        Snapshot { meta, tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| err(format!("missing tensor `{}`", name)))
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (k, v) in &self.tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                store.insert(rest, v.clone());
            }
        }
        store
    }

    fn body(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        let meta = serde_json::to_vec(&self.meta).map_err(|e| err(e.to_string()))?;
        body.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        body.extend_from_slice(&meta);
        body.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.push(u8::from(t.requires_grad()));
            body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                body.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(body)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = self.body()?;
        let mut out = Vec::with_capacity(body.len() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&body));
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 52 || &bytes[..8] != MAGIC {
            return Err(err("not a snapshot file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {}", version)));
        }
        let checksum = &bytes[12..44];
        let body_len = u64::from_le_bytes(bytes[44..52].try_into().unwrap()) as usize;
        let body = &bytes[52..];
        if body.len() != body_len {
            return Err(err(format!("body length {} does not match header {}", body.len(), body_len)));
        }
        if Sha256::digest(body).as_slice() != checksum {
            return Err(err("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let meta_len = r.u32()? as usize;
        let meta: serde_json::Value =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| err(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| err("tensor name is not UTF-8"))?
                .to_string();
            let flags = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let mut t = Tensor::new(shape, data)?;
            t.set_requires_grad(flags & 1 == 1);
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(err("trailing bytes after last tensor"));
        }
        Ok(Snapshot { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Snapshot::from_bytes(&std::fs::read(path)?)
    }
}
