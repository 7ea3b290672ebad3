//! Checkpoint file: the line `CVRLAB-CKPT v1`, one line of JSON mapping each
//! tensor name to `{shape, offset, length}` (byte offsets into the payload),
//! then the raw little-endian `f32` payloads in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{NumericsError, ParamStore, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &str = "CVRLAB-CKPT v1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

fn err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

pub fn to_bytes<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut header = Map::new();
    let mut payload = Vec::with_capacity(params.numel() * 4);
    for (_, name, t) in params.iter() {
        let entry = Entry {
            shape: t.shape().to_vec(),
            offset: payload.len(),
            length: t.numel() * 4,
        };
        for v in t.data() {
            payload.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        header.insert(name.to_string(), serde_json::to_value(entry).expect("entry serializes"));
    }
    let mut out = Vec::with_capacity(payload.len() + 256);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(Value::Object(header).to_string().as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>, NumericsError> {
    let magic_end = MAGIC.len();
    if bytes.len() <= magic_end || &bytes[..magic_end] != MAGIC.as_bytes() || bytes[magic_end] != b'\n' {
        return Err(err("missing CVRLAB-CKPT v1 header line"));
    }
    let rest = &bytes[magic_end + 1..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err("unterminated JSON header"))?;
    let header: Map<String, Value> =
        serde_json::from_slice(&rest[..nl]).map_err(|e| err(format!("bad JSON header: {e}")))?;
    let payload = &rest[nl + 1..];
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for (name, value) in header {
        let entry: Entry =
            serde_json::from_value(value).map_err(|e| err(format!("bad entry for {name}: {e}")))?;
        let numel: usize = entry.shape.iter().product();
        if entry.length != numel * 4 || entry.offset != expected_offset {
            return Err(err(format!("inconsistent layout for {name}")));
        }
        let raw = payload
            .get(entry.offset..entry.offset + entry.length)
            .ok_or_else(|| err(format!("payload truncated at {name}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap_or_else(T::nan))
            .collect();
        store.insert(name, Tensor::new(entry.shape, data)?);
        expected_offset += entry.length;
    }
    if expected_offset != payload.len() {
        return Err(err("trailing bytes after payload"));
    }
    Ok(store)
}

pub fn save<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<(), NumericsError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(params))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>, NumericsError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
