//! `MOODFD` feature dumps.
//!
//! Little-endian layout:
//!
//! | bytes   | content                                  |
//! |---------|------------------------------------------|
//! | 0..8    | magic `"MOODFD1\n"`                      |
//! | 8..12   | `u32` version, always 1                  |
//! | 12      | `u8` dtype (1 = f32, 2 = f64)            |
//! | 13      | `u8` has_labels (0 or 1)                 |
//! | 14..16  | `u16` reserved, must be 0                |
//! | 16..24  | `u64` n_rows                             |
//! | 24..32  | `u64` n_cols                             |
//! | 32..    | n_rows·n_cols values, row-major          |
//! | ..      | n_rows `i32` labels iff has_labels = 1   |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_file, Dtype};
use crate::error::{MoodError, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"MOODFD1\n";
pub const HEADER_LEN: usize = 32;
const VERSION: u32 = 1;

/// Per-sample feature vectors with optional class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    features: Matrix,
    labels: Option<Vec<usize>>,
    source: String,
}

impl FeatureSet {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, source: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(MoodError::Validation(format!(
                "feature matrix must be non-empty, got {}x{}",
                features.rows(),
                features.cols()
            )));
        }
        if let Some((i, v)) = features
            .as_slice()
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(MoodError::Validation(format!(
                "non-finite feature value {v} at flat index {i}"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(MoodError::Validation(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
            if let Some(bad) = l.iter().find(|&&v| v > i32::MAX as usize) {
                return Err(MoodError::Validation(format!("label {bad} exceeds i32 range")));
            }
        }
        Ok(FeatureSet {
            features,
            labels,
            source: source.into(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }
}

/// Serializes `fs` in `dtype`. Values are rounded to the stored precision.
pub fn encode_feature_dump(fs: &FeatureSet, dtype: Dtype) -> Vec<u8> {
    let (n, d) = (fs.n_rows(), fs.n_cols());
    let label_bytes = if fs.labels.is_some() { 4 * n } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * dtype.width() + label_bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(u8::from(fs.labels.is_some()));
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for &v in fs.features.as_slice() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    if let Some(labels) = &fs.labels {
        for &l in labels {
            out.extend_from_slice(&(l as i32).to_le_bytes());
        }
    }
    out
}

/// Parses a complete dump. Anything short of a fully valid file is a format error.
pub fn decode_feature_dump(bytes: &[u8], source: impl Into<String>) -> Result<FeatureSet> {
    let fmt = |m: String| MoodError::Format(m);
    if bytes.len() < HEADER_LEN {
        return Err(fmt(format!("file of {} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..8] != MAGIC {
        return Err(fmt("bad magic; not a MOODFD file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[12])?;
    let has_labels = match bytes[13] {
        0 => false,
        1 => true,
        other => return Err(fmt(format!("has_labels flag must be 0 or 1, got {other}"))),
    };
    let reserved = u16::from_le_bytes(bytes[14..16].try_into().unwrap());
    if reserved != 0 {
        return Err(fmt(format!("reserved field must be 0, got {reserved}")));
    }
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let d = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
    if n == 0 || d == 0 {
        return Err(fmt(format!("empty matrix {n}x{d}")));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(dtype.width() as u64))
        .and_then(|b| b.checked_add(if has_labels { n.checked_mul(4)? } else { 0 }))
        .and_then(|b| b.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| fmt(format!("declared shape {n}x{d} overflows")))?;
    if bytes.len() as u64 != expected {
        return Err(fmt(format!(
            "header declares {n}x{d} ({expected} bytes total) but file holds {} bytes",
            bytes.len()
        )));
    }
    let (n, d) = (n as usize, d as usize);
    let payload = &bytes[HEADER_LEN..HEADER_LEN + n * d * dtype.width()];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let labels = if has_labels {
        let raw = &bytes[HEADER_LEN + n * d * dtype.width()..];
        let mut labels = Vec::with_capacity(n);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let l = i32::from_le_bytes(c.try_into().unwrap());
            if l < 0 {
                return Err(fmt(format!("negative label {l} at row {i}")));
            }
            labels.push(l as usize);
        }
        Some(labels)
    } else {
        None
    };
    let features = Matrix::from_vec(n, d, values)?;
    FeatureSet::new(features, labels, source).map_err(|e| match e {
        MoodError::Validation(m) => MoodError::Format(m),
        other => other,
    })
}

/// Writes `fs` as float32.
pub fn write_feature_dump(fs: &FeatureSet, path: &Path) -> Result<()> {
    write_feature_dump_as(fs, path, Dtype::F32)
}

pub fn write_feature_dump_as(fs: &FeatureSet, path: &Path, dtype: Dtype) -> Result<()> {
    // FeatureSet::new already rejects non-finite input, but f64 -> f32 can overflow.
    if dtype == Dtype::F32 {
        if let Some(v) = fs
            .features
            .as_slice()
            .iter()
            .find(|v| !(**v as f32).is_finite())
        {
            return Err(MoodError::Validation(format!("value {v} is not representable as f32")));
        }
    }
    atomic_write(path, &encode_feature_dump(fs, dtype))
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureSet> {
    let bytes = read_file(path)?;
    decode_feature_dump(&bytes, path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> FeatureSet {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.5]]).unwrap();
        FeatureSet::new(m, Some(vec![0, 1]), "test").unwrap()
    }

    #[test]
    fn two_by_three_with_labels_is_64_bytes() {
        // 32 header + 2*3*4 data + 2*4 labels
        let bytes = encode_feature_dump(&sample(), Dtype::F32);
        assert_eq!(bytes.len(), 64);
        assert_eq!(&bytes[..8], b"MOODFD1\n");
        assert_eq!(bytes[12], 1);
        assert_eq!(bytes[13], 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 1.0);
        assert_eq!(i32::from_le_bytes(bytes[60..64].try_into().unwrap()), 1);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.moodfd");
        let fs = sample();
        write_feature_dump(&fs, &path).unwrap();
        let back = read_feature_dump(&path).unwrap();
        assert_eq!(back.features(), fs.features());
        assert_eq!(back.labels(), fs.labels());
    }

    #[test]
    fn non_finite_rejected_without_creating_file() {
        let m = Matrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(FeatureSet::new(m, None, ""), Err(MoodError::Validation(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.moodfd");
        let m = Matrix::from_rows(&[vec![1e300]]).unwrap();
        let fs = FeatureSet::new(m, None, "").unwrap();
        assert!(matches!(write_feature_dump(&fs, &path), Err(MoodError::Validation(_))));
        assert!(!path.exists());
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_feature_dump(&sample(), Dtype::F32);
        bytes[0] = b'X';
        assert!(matches!(decode_feature_dump(&bytes, ""), Err(MoodError::Format(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        // header says 10 rows, payload holds 9
        let m = Matrix::from_vec(10, 2, (0..20).map(f64::from).collect()).unwrap();
        let fs = FeatureSet::new(m, None, "").unwrap();
        let bytes = encode_feature_dump(&fs, Dtype::F64);
        let short = &bytes[..bytes.len() - 2 * 8];
        assert!(matches!(decode_feature_dump(short, ""), Err(MoodError::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_feature_dump(&long, ""), Err(MoodError::Format(_))));
    }

    #[test]
    fn unsupported_dtype_rejected() {
        let mut bytes = encode_feature_dump(&sample(), Dtype::F32);
        bytes[12] = 3;
        assert!(matches!(decode_feature_dump(&bytes, ""), Err(MoodError::Format(_))));
    }

    #[test]
    fn negative_label_and_bad_flags_rejected() {
        let mut bytes = encode_feature_dump(&sample(), Dtype::F32);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&(-1i32).to_le_bytes());
        assert!(matches!(decode_feature_dump(&bytes, ""), Err(MoodError::Format(_))));

        let mut bytes = encode_feature_dump(&sample(), Dtype::F32);
        bytes[13] = 2;
        assert!(decode_feature_dump(&bytes, "").is_err());
        let mut bytes = encode_feature_dump(&sample(), Dtype::F32);
        bytes[14] = 1;
        assert!(decode_feature_dump(&bytes, "").is_err());
    }

    #[test]
    fn absurd_shape_does_not_overflow() {
        let mut bytes = encode_feature_dump(&sample(), Dtype::F64);
        bytes[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_feature_dump(&bytes, ""), Err(MoodError::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_at_stored_precision(
            n in 1usize..6,
            d in 1usize..6,
            seed in proptest::collection::vec(-1e6f32..1e6f32, 36),
            labelled: bool,
            wide: bool,
        ) {
            let values: Vec<f64> = seed.iter().take(n * d).map(|&v| f64::from(v)).collect();
            let values = if values.len() < n * d { vec![0.5; n * d] } else { values };
            let labels = labelled.then(|| (0..n).map(|i| i % 3).collect());
            let fs = FeatureSet::new(Matrix::from_vec(n, d, values).unwrap(), labels, "p").unwrap();
            let dtype = if wide { Dtype::F64 } else { Dtype::F32 };
            let back = decode_feature_dump(&encode_feature_dump(&fs, dtype), "p").unwrap();
            prop_assert_eq!(back, fs);
        }

        #[test]
        fn arbitrary_bytes_never_yield_garbage(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            if let Ok(fs) = decode_feature_dump(&bytes, "") {
                prop_assert!(fs.features().is_finite());
                prop_assert!(fs.n_rows() >= 1 && fs.n_cols() >= 1);
            }
        }

        #[test]
        fn header_prefixed_bytes_never_yield_garbage(
            rest in proptest::collection::vec(any::<u8>(), 0..96),
            n in 0u64..4, d in 0u64..4, flag in 0u8..3, code in 0u8..4,
        ) {
            let mut bytes = MAGIC.to_vec();
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.push(code);
            bytes.push(flag);
            bytes.extend_from_slice(&[0, 0]);
            bytes.extend_from_slice(&n.to_le_bytes());
            bytes.extend_from_slice(&d.to_le_bytes());
            bytes.extend_from_slice(&rest);
            if let Ok(fs) = decode_feature_dump(&bytes, "") {
                prop_assert_eq!(fs.n_rows() as u64, n);
                prop_assert_eq!(fs.n_cols() as u64, d);
                prop_assert!(fs.features().is_finite());
            }
        }
    }
}
