//! Weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u64            header length in bytes (H)
//! [u8; H]        UTF-8 JSON array of {"name", "shape", "byte_offset"}
//! [f32 LE; ...]  tensor blobs, concatenated in header order
//! ```
//!
//! `byte_offset` is relative to the first byte after the header. Files
//! written by [`write_checkpoint`] round-trip byte-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

pub fn encode_checkpoint(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if entries.iter().any(|e: &TensorEntry| &e.name == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&entries)?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cursor = bytes;
    let mut len_buf = [0u8; 8];
    cursor
        .read_exact(&mut len_buf)
        .map_err(|_| Error::Checkpoint("file shorter than the 8-byte header length".into()))?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    if cursor.len() < header_len {
        return Err(Error::Checkpoint(format!(
            "header claims {header_len} bytes but only {} remain",
            cursor.len()
        )));
    }
    let entries: Vec<TensorEntry> = serde_json::from_slice(&cursor[..header_len])
        .map_err(|e| Error::Checkpoint(format!("bad JSON header: {e}")))?;
    let blobs = &cursor[header_len..];
    let mut expected_offset = 0u64;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.byte_offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` at offset {} but blobs must be contiguous (expected {expected_offset})",
                e.name, e.byte_offset
            )));
        }
        let count: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + 4 * count;
        let raw = blobs.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{}` runs past the end of the file", e.name))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        expected_offset = end as u64;
        out.push((e.name.clone(), Tensor::new(e.shape, data)?));
    }
    if expected_offset as usize != blobs.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            blobs.len() - expected_offset as usize
        )));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
