//! Named-tensor checkpoints.
//!
//! Layout: `PLRK`, u32 LE version, u64 LE header length, a JSON header padded
//! with spaces so the payload starts on a 64-byte boundary, then raw
//! little-endian f32 tensors, each starting on a 64-byte boundary (offsets are
//! relative to the payload start). See `docs/formats.md`.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use pointlora_core::model::{Model, ModelConfig};
use pointlora_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PLRK";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    /// Adapters were folded into the base weights.
    pub merged: bool,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub frozen: bool,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn is_merged(model: &Model<f32>) -> bool {
    !model.has_adapters() && !model.config.peft.lora_sites.is_empty()
}

pub fn encode(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for (_, p) in model.store.iter() {
        let length = p.value.numel() * 4;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            dtype: "f32".into(),
            shape: p.value.shape().to_vec(),
            offset: offset as u64,
            length: length as u64,
            frozen: !p.trainable,
        });
        offset = align_up(offset + length);
    }
    let header = Header {
        merged: is_merged(model),
        config: model.config.clone(),
        tensors,
    };
    let mut json = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    let padded = align_up(PREAMBLE + json.len()) - PREAMBLE;
    json.extend(std::iter::repeat_n(' ', padded - json.len()));

    let payload_len = header.tensors.last().map_or(0, |t| (t.offset + t.length) as usize);
    let mut out = Vec::with_capacity(PREAMBLE + padded + payload_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(padded as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    let start = out.len();
    for ((_, p), entry) in model.store.iter().zip(&header.tensors) {
        out.resize(start + entry.offset as usize, 0);
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Validated header plus the byte offset where the payload begins.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Format("file shorter than the preamble".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version} (expected {VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let start = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    if start % ALIGN != 0 {
        return Err(Error::Format("payload is not 64-byte aligned".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..start])
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?;

    let payload = (bytes.len() - start) as u64;
    let mut end = 0u64;
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(Error::Format(format!("{}: unsupported dtype {:?}", t.name, t.dtype)));
        }
        let numel = t.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
        if numel.and_then(|n| n.checked_mul(4)) != Some(t.length) {
            return Err(Error::Format(format!("{}: length does not match shape", t.name)));
        }
        if t.offset % ALIGN as u64 != 0 {
            return Err(Error::Format(format!("{}: offset {} is not 64-byte aligned", t.name, t.offset)));
        }
        if t.offset < end {
            return Err(Error::Format(format!("{}: overlapping or unordered offset", t.name)));
        }
        end = t
            .offset
            .checked_add(t.length)
            .filter(|&e| e <= payload)
            .ok_or_else(|| Error::Format(format!("{}: payload truncated", t.name)))?;
    }
    if end != payload {
        return Err(Error::Format(format!("{} trailing payload bytes", payload - end)));
    }
    Ok((header, start))
}

pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    let (header, start) = read_header(bytes)?;
    let mut by_name = HashMap::new();
    for (i, t) in header.tensors.iter().enumerate() {
        if by_name.insert(t.name.as_str(), i).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", t.name)));
        }
    }
    let mut model = Model::<f32>::zeroed(header.config.clone(), !header.merged)
        .map_err(|e| Error::Schema(format!("checkpoint config rejected: {e}")))?;
    let mut used = 0;
    for (_, p) in model.store.iter_mut() {
        let &i = by_name
            .get(p.name.as_str())
            .ok_or_else(|| Error::Schema(format!("missing tensor {}", p.name)))?;
        let t = &header.tensors[i];
        if t.shape != p.value.shape() {
            return Err(Error::Schema(format!(
                "{}: shape {:?} does not match config shape {:?}",
                t.name,
                t.shape,
                p.value.shape()
            )));
        }
        let raw = &bytes[start + t.offset as usize..start + (t.offset + t.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        p.value = Tensor::new(&t.shape, data)?;
        p.trainable = !t.frozen;
        used += 1;
    }
    if used != header.tensors.len() {
        let extra = header
            .tensors
            .iter()
            .find(|t| model.store.find(&t.name).is_none())
            .map_or_else(String::new, |t| t.name.clone());
        return Err(Error::Schema(format!("unexpected tensor {extra} for this config")));
    }
    Ok(model)
}

/// Writes through a temporary sibling and renames, so a failed save never
/// leaves a partial file at `path`.
pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
