//! Self-describing weight files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes              | content                                            |
//! |--------------------|----------------------------------------------------|
//! | `0..4`             | magic `NBTF`                                        |
//! | `4..8`             | format version, `u32`                              |
//! | `8..12`            | header length `H` in bytes, `u32`                   |
//! | `12..12+H`         | UTF-8 JSON header: model config and tensor index    |
//! | `12+H..`           | payload: `f32` values, tensors back to back         |
//!
//! Index offsets are byte offsets from the start of the payload.

use super::{ModelConfig, Tensor, TransformerWeights};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"NBTF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<IndexEntry>,
    payload_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

pub fn write_weights<W: Write>(w: &TransformerWeights, mut out: W) -> Result<()> {
    let mut index = Vec::new();
    let mut payload: Vec<u8> = Vec::with_capacity(4 * w.parameter_count());
    for (name, t) in w.named_tensors() {
        index.push(IndexEntry { name, shape: t.shape.clone(), dtype: "f32".into(), offset: payload.len() as u64 });
        for &v in &t.data {
            let f = v as f32;
            if f as f64 != v {
                return Err(Error::Format(format!("value {v} is not exactly representable as f32")));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
    }
    let header = Header { config: w.config.clone(), tensors: index, payload_bytes: payload.len() as u64 };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let hlen = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&hlen.to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn read_weights<R: Read>(mut input: R) -> Result<TransformerWeights> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse(&bytes)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::Format(format!("truncated file: need {n} bytes of {what} at offset {at}, file has {}", bytes.len()))
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn parse(bytes: &[u8]) -> Result<TransformerWeights> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u32::from_le_bytes(take(bytes, &mut at, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut at, hlen, "header")?)
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    header.config.validate().map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    let payload = &bytes[at..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }

    let mut w = TransformerWeights::<f64>::zeros(&header.config)?;
    let expected = w.named_tensors_mut();
    if expected.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "config implies {} tensors, index lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    let mut cursor = 0u64;
    for ((name, t), entry) in expected.into_iter().zip(&header.tensors) {
        if entry.name != name {
            return Err(Error::Format(format!("tensor `{}` found where `{name}` was expected", entry.name)));
        }
        if entry.shape != t.shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, config implies {:?}",
                entry.shape, t.shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("tensor `{name}` has dtype {}, only f32 is supported", entry.dtype)));
        }
        if entry.offset != cursor {
            return Err(Error::Format(format!("tensor `{name}` at offset {}, expected {cursor}", entry.offset)));
        }
        let n = t.len();
        let start = cursor as usize;
        let raw = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` runs past the payload")))?;
        for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
            let f = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !f.is_finite() {
                return Err(Error::Format(format!("tensor `{name}` contains a non-finite value")));
            }
            *v = f as f64;
        }
        cursor += 4 * n as u64;
    }
    if cursor != header.payload_bytes {
        return Err(Error::Format(format!("{} trailing payload bytes", header.payload_bytes - cursor)));
    }
    Ok(w)
}

pub fn save_weights(w: &TransformerWeights, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(w, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<TransformerWeights> {
    parse(&std::fs::read(path)?)
}

impl Tensor<f64> {
    /// FNV-1a over the little-endian `f32` bytes, for manifests.
    pub fn fnv1a(&self, mut h: u64) -> u64 {
        for &v in &self.data {
            for b in (v as f32).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

impl TransformerWeights<f64> {
    /// Content checksum of all tensors (FNV-1a, 64-bit).
    pub fn checksum(&self) -> u64 {
        self.tensors().fold(0xcbf2_9ce4_8422_2325, |h, t| t.fnv1a(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::transformer::init_model;

    fn model() -> TransformerWeights {
        init_model(&ModelConfig { d: 8, h: 2, layers: 1, ..ModelConfig::desk() }, &mut rng::stream(4)).unwrap()
    }

    fn bytes(w: &TransformerWeights) -> Vec<u8> {
        let mut b = Vec::new();
        write_weights(w, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let w = model();
        let back = read_weights(bytes(&w).as_slice()).unwrap();
        assert_eq!(w, back);
        assert_eq!(w.checksum(), back.checksum());
    }

    #[test]
    fn layout_prefix() {
        let b = bytes(&model());
        assert_eq!(&b[..4], b"NBTF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), FORMAT_VERSION);
        let hlen = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&b[12..12 + hlen]).unwrap();
        assert_eq!(header["config"]["d"], 8);
        assert_eq!(header["tensors"][0]["name"], "input.affine");
        assert_eq!(b.len() - 12 - hlen, 4 * model().parameter_count());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut b = bytes(&model());
        b[0] = b'X';
        assert!(matches!(read_weights(b.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut b = bytes(&model());
        b[4] = 99;
        assert!(matches!(read_weights(b.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_rejected() {
        let b = bytes(&model());
        for cut in [2, 10, 40, b.len() - 1] {
            assert!(matches!(read_weights(&b[..cut]), Err(Error::Format(_))), "cut at {cut}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let b = bytes(&model());
        let hlen = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&b[12..12 + hlen]).unwrap();
        header["config"]["d"] = serde_json::json!(16);
        header["config"]["h"] = serde_json::json!(2);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = b[..8].to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&b[12 + hlen..]);
        assert!(matches!(read_weights(out.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn non_f32_values_are_refused_on_write() {
        let mut w = model();
        w.target_shift.data[0] = 0.1;
        assert!(write_weights(&w, Vec::new()).is_err());
    }
}
