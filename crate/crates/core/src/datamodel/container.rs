//! Checkpoint container: an 8-byte magic, a `u64` header length, a JSON
//! header, then raw little-endian tensor payloads. Tensor offsets in the
//! header count from the first payload byte, i.e. the byte right after the
//! JSON header.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{atomic_write, read_file};
use crate::error::{MoodError, Result};

const MAGIC: &[u8; 8] = b"MOODCK1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(MoodError::Format(format!("unsupported dtype code {other}"))),
        }
    }
}

/// Directory entry for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// A named collection of tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    tensors: Vec<(String, Dtype, Vec<usize>, Vec<f64>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), dtype, shape, data));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.0.as_str())
    }

    /// Looks up a tensor and checks its shape.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let (_, _, s, data) = self
            .tensors
            .iter()
            .find(|t| t.0 == name)
            .ok_or_else(|| MoodError::Format(format!("{} container lacks tensor {name:?}", self.kind)))?;
        if s != shape {
            return Err(MoodError::Format(format!(
                "tensor {name:?} has shape {s:?}, expected {shape:?}"
            )));
        }
        Ok(data)
    }

    pub fn tensor_shape(&self, name: &str) -> Result<&[usize]> {
        self.tensors
            .iter()
            .find(|t| t.0 == name)
            .map(|t| t.2.as_slice())
            .ok_or_else(|| MoodError::Format(format!("{} container lacks tensor {name:?}", self.kind)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.0 == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, dtype, shape, data) in &self.tensors {
            let offset = payload.len() as u64;
            for &v in data {
                match dtype {
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: *dtype,
                shape: shape.clone(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("container header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| MoodError::Format(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("not a checkpoint container (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = 16u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| fmt("header length exceeds file size".into()))? as usize;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| fmt(format!("bad container header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let count = t
                .shape
                .iter()
                .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                .ok_or_else(|| fmt(format!("tensor {:?} shape overflows", t.name)))?;
            if count.checked_mul(t.dtype.width()) != Some(t.length as usize) {
                return Err(fmt(format!("tensor {:?} length disagrees with shape", t.name)));
            }
            let end = t
                .offset
                .checked_add(t.length)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or_else(|| fmt(format!("tensor {:?} extends past end of file", t.name)))?;
            let raw = &payload[t.offset as usize..end as usize];
            let data: Vec<f64> = match t.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(fmt(format!("tensor {:?} holds non-finite values", t.name)));
            }
            tensors.push((t.name, t.dtype, t.shape, data));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::from_bytes(&read_file(path)?)
    }

    /// Loads and checks the container kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != kind {
            return Err(MoodError::Format(format!(
                "{} holds a {:?} container, expected {kind:?}",
                path.display(),
                c.kind
            )));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_mixed_dtypes() {
        let mut c = Container::new("test", json!({"d": 3}));
        c.push("a", Dtype::F32, vec![2], vec![0.5, -1.25]);
        c.push("b", Dtype::F64, vec![1, 2], vec![0.1, 1e-300]);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor("b", &[1, 2]).unwrap(), &[0.1, 1e-300]);
        assert!(back.tensor("b", &[2]).is_err());
        assert!(back.tensor("zzz", &[2]).is_err());
    }

    #[test]
    fn truncation_detected() {
        let mut c = Container::new("test", json!(null));
        c.push("a", Dtype::F64, vec![4], vec![1.0; 4]);
        let bytes = c.to_bytes();
        for cut in [0, 10, 20, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
