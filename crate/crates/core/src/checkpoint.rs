//! Checkpoint container.
//!
//! Layout: the 8-byte magic `LEDGCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then raw little-endian
//! `f32` tensor data in header order. The header carries a `kind` string,
//! free-form metadata (config snapshot, step, ...) and the tensor index.
//! Tensors are stored sorted by name, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LEDGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value, tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Writes via a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path, device: &Device) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(err(path, format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| err(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| err(path, format!("bad header: {e}")))?;
        let mut offset = 20 + hlen;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| err(path, format!("truncated data for {}", entry.name)))?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            tensors.insert(entry.name, Tensor::from_vec(values, entry.shape, device)?);
        }
        if offset != bytes.len() {
            return Err(err(path, "trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path, device)
    }

    /// Loads and checks the `kind` field.
    pub fn load_kind(path: &Path, kind: &str, device: &Device) -> Result<Self> {
        let c = Self::load(path, device)?;
        if c.kind != kind {
            return Err(err(path, format!("expected a {kind} checkpoint, found {}", c.kind)));
        }
        Ok(c)
    }

    /// Deserializes `meta[key]`.
    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| err(path, format!("metadata lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| err(path, format!("metadata `{key}`: {e}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}
