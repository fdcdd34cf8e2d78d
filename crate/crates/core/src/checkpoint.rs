//! Binary parameter checkpoints.
//!
//! Layout: the magic `SPI1`, a little-endian `u32` header length, a JSON
//! header listing tensor names and shapes plus free-form metadata, then every
//! tensor's values as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"SPI1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Serialises parameters; values are stored as `f32`.
pub fn encode(params: &ParamSet, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        tensors: params
            .iter()
            .map(|(n, t)| Entry {
                name: n.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::InvalidArgument("checkpoint header too large".into()))?;
    let total: usize = params.iter().map(|(_, t)| t.data.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 4 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("not an SPI1 checkpoint".into()));
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let mut pos = 8 + len;
    let mut params = ParamSet::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| bad(format!("truncated data for `{}`", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        pos += 4 * n;
        params.insert(e.name, Tensor::new(e.shape, data))?;
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((params, header.meta))
}

pub fn save(path: &Path, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_for_f32_values() {
        let mut p = ParamSet::new();
        p.insert("theta.a", Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 7.0, 0.0]))
            .unwrap();
        p.insert("n", Tensor::scalar(0.1f32 as f64)).unwrap();
        let meta = serde_json::json!({"seed": 4});
        let bytes = encode(&p, &meta).unwrap();
        let (q, m) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = ParamSet::new().with("x", Tensor::scalar(1.0)).unwrap();
        let bytes = encode(&p, &serde_json::Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("f")).is_err());
        assert!(decode(b"SPI0\0\0\0\0", Path::new("f")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, Path::new("f")).is_err());
    }
}
