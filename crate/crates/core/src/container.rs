//! The `SFM1` tensor container shared by model and cascade checkpoints.
//!
//! ```text
//! "SFM1" | u64 LE metadata length | metadata (UTF-8 JSON) | f64 LE payloads
//! ```
//!
//! The metadata object carries a `tensors` array of `{name, shape}` entries;
//! payloads follow in that order with no padding.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFM1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// A parsed header whose payload has not been decoded yet.
#[derive(Debug)]
pub struct RawContainer {
    pub meta: Map<String, Value>,
    pub entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl RawContainer {
    pub fn parse(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing SFM1 magic".into()));
        }
        let meta_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let meta_end = usize::try_from(meta_len)
            .ok()
            .and_then(|n| n.checked_add(12))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("metadata extends past end of file".into()))?;
        let text = std::str::from_utf8(&bytes[12..meta_end])
            .map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
        let mut meta: Map<String, Value> = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("metadata is not a JSON object: {e}")))?;
        let entries: Vec<TensorEntry> = match meta.remove("tensors") {
            Some(v) => serde_json::from_value(v)
                .map_err(|e| Error::Format(format!("bad tensor table: {e}")))?,
            None => return Err(Error::Format("metadata has no tensor table".into())),
        };
        let payload = bytes[meta_end..].to_vec();
        Ok(RawContainer {
            meta,
            entries,
            payload,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(bytes)
    }

    /// Decodes payloads; the byte count must match the tensor table exactly.
    pub fn into_tensors(self) -> Result<(Map<String, Value>, IndexMap<String, Tensor>)> {
        let mut expected = 0usize;
        for e in &self.entries {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("shape of {} overflows", e.name)))?;
            expected = expected
                .checked_add(n.checked_mul(8).ok_or_else(|| Error::Format("payload overflows".into()))?)
                .ok_or_else(|| Error::Format("payload overflows".into()))?;
        }
        if expected != self.payload.len() {
            return Err(Error::Format(format!(
                "payload holds {} bytes, tensor table needs {expected} (truncated or corrupt)",
                self.payload.len()
            )));
        }
        let mut tensors = IndexMap::with_capacity(self.entries.len());
        let mut words = self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for e in self.entries {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = words.by_ref().take(n).collect();
            let t = Tensor::new(&e.shape, data)
                .map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", e.name)));
            }
        }
        Ok((self.meta, tensors))
    }
}

pub fn encode<'a>(
    meta: Map<String, Value>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>> {
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut meta = meta;
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    meta.insert("tensors".into(), serde_json::to_value(entries)?);
    let text = serde_json::to_string(&meta)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(12 + text.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes to a sibling temp file and renames, so readers never see half a file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(
            values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            split in 1usize..40,
        ) {
            let split = split.min(values.len());
            let a = Tensor::vector(values[..split].to_vec());
            let rest = if split < values.len() { values[split..].to_vec() } else { vec![0.0] };
            let b = Tensor::vector(rest);
            let mut meta = Map::new();
            meta.insert("kind".into(), Value::from("test"));
            let bytes = encode(meta.clone(), [("a", &a), ("b", &b)]).unwrap();
            let (m, ts) = RawContainer::parse(bytes).unwrap().into_tensors().unwrap();
            prop_assert_eq!(m, meta);
            let back_a: Vec<u64> = ts["a"].data().iter().map(|v| v.to_bits()).collect();
            let orig_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(back_a, orig_a);
            prop_assert_eq!(&ts["b"], &b);
        }
    }

    #[test]
    fn truncation_and_magic_detected() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let bytes = encode(Map::new(), [("t", &t)]).unwrap();
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            let r = RawContainer::parse(bytes[..cut].to_vec()).and_then(RawContainer::into_tensors);
            assert!(matches!(r, Err(Error::Format(_))), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(RawContainer::parse(bad), Err(Error::Format(_))));
    }
}
