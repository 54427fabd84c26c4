//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "VMDCKPT\0"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! tensors      for each entry of header.tensors, in order:
//!                count  u64
//!                data   count × f64
//! ```
//!
//! The JSON header carries `format_version`, the `model_config`, the list of
//! `{name, shape}` tensor descriptors, and a free-form `meta` object (used by
//! training for optimizer and progress state).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VMDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    tensors: Vec<TensorDesc>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        model_config: ckpt.model_config.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, t)| TensorDesc {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Contract(format!("checkpoint header: {e}")))?;
    let body: usize = ckpt.tensors.iter().map(|(_, t)| 8 + 8 * t.numel()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + body);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &ckpt.tensors {
        out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.path,
                format!("byte offset {}", self.pos),
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, "byte offset 0", "not a checkpoint file (bad magic)"));
    }
    let header_len = r.u64("header length")? as usize;
    let header_at = r.pos;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::parse(path, format!("header byte {}", header_at + e.column()), e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            path,
            "header",
            format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.format_version
            ),
        ));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for desc in header.tensors {
        let at = r.pos;
        let count = r.u64(&desc.name)? as usize;
        let expected: usize = desc.shape.iter().product();
        if count != expected {
            return Err(Error::parse(
                path,
                format!("byte offset {at}"),
                format!("tensor {} stores {count} values but shape {:?} needs {expected}", desc.name, desc.shape),
            ));
        }
        let raw = r.take(count.saturating_mul(8), &desc.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((desc.name, Tensor::new(desc.shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(
            path,
            format!("byte offset {}", r.pos),
            "trailing bytes after the last tensor",
        ));
    }
    Ok(Checkpoint {
        model_config: header.model_config,
        tensors,
        meta: header.meta,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
