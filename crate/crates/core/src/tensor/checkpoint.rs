//! Flat binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "HSGCKPT\0"
//! hdr_len    u64
//! header     hdr_len bytes of UTF-8 JSON:
//!            {"format_version": 1,
//!             "params": {name: {"shape": [rows, cols], "offset": k}, ...},
//!             "meta": <arbitrary JSON>}
//! payload    f64 values, row-major per parameter; `offset` counts f64s
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HSGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Entry {
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub params: BTreeMap<String, Entry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(params: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    let mut offset = 0;
    for (name, p) in params.iter() {
        entries.insert(
            name.to_string(),
            Entry {
                shape: [p.value.nrows(), p.value.ncols()],
                offset,
            },
        );
        for v in p.value.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.value.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        params: entries,
        meta: meta.clone(),
    };
    let hdr = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + hdr.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(hdr.len() as u64).to_le_bytes());
    out.extend_from_slice(&hdr);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |msg: &str| Error::data(format!("corrupt checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hdr_end = 16usize
        .checked_add(hdr_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..hdr_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let payload = &bytes[hdr_end..];
    let mut store = ParamStore::new();
    for (name, e) in &header.params {
        let n = e.shape[0] * e.shape[1];
        let start = e.offset * 8;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(bad(&format!("payload too short for {name}")));
        }
        let vals: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), vals)
            .map_err(|_| bad(&format!("bad shape for {name}")))?;
        store.insert(name.clone(), arr)?;
    }
    Ok((store, header.meta))
}

pub fn save(path: &Path, params: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode(params, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    decode(&std::fs::read(path)?)
}
