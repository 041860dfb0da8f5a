//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PMEMCKPT"            8 bytes
//! format version         u32
//! header length          u64
//! header                 UTF-8 JSON: model config + ordered tensor manifest
//! payload                IEEE-754 f32 values, tensors in manifest order
//! ```
//!
//! Manifest offsets are byte offsets from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"PMEMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(params: &ModelParams) -> Result<Vec<u8>> {
    let named = params.named_tensors();
    let mut offset = 0;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                offset,
            };
            offset += t.len() * 4;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        config: params.config.clone(),
        tensors,
    })?;

    let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &named {
        for v in t.as_slice() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("missing PMEMCKPT magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| fail("header runs past end of file"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut params = ModelParams::zeros(&header.config)?;
    let mut named = params.named_tensors_mut();
    if named.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            named.len()
        )));
    }
    let mut expected_offset = 0;
    for ((name, t), entry) in named.iter_mut().zip(&header.tensors) {
        if *name != entry.name || t.shape() != (entry.rows, entry.cols) {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} {}x{} does not match expected {} {:?}",
                entry.name,
                entry.rows,
                entry.cols,
                name,
                t.shape()
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!("tensor {} has offset {}, expected {expected_offset}", entry.name, entry.offset)));
        }
        let end = entry.offset + t.len() * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("payload truncated inside {}", entry.name)));
        }
        for (v, chunk) in t
            .as_mut_slice()
            .iter_mut()
            .zip(payload[entry.offset..end].chunks_exact(4))
        {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::Checkpoint(format!("non-finite value in {}", entry.name)));
            }
            *v = x as f64;
        }
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(fail("trailing bytes after payload"));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::init(&ModelConfig {
            vocab_size: 10,
            n_layers: 2,
            n_heads: 2,
            d_model: 4,
            d_ff: 8,
            max_seq_len: 6,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = encode(&params()).unwrap();
        let again = encode(&decode(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn loaded_weights_are_f32_rounded() {
        let mut p = params();
        let loaded = decode(&encode(&p).unwrap()).unwrap();
        p.round_to_f32();
        assert_eq!(loaded, p);
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = encode(&params()).unwrap();
        assert_eq!(&bytes[..8], b"PMEMCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        assert_eq!(header.tensors[0].name, "token_embedding");
        assert_eq!(header.tensors[1].offset, 10 * 4 * 4);
        let total: usize = header.tensors.iter().map(|t| t.rows * t.cols * 4).sum();
        assert_eq!(bytes.len(), 20 + hlen + total);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&params()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes;
        bad[8] = 9;
        assert!(decode(&bad).is_err());
    }
}
