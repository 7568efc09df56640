//! `TCA1` tensor container used for weights, class embeddings, datasets and
//! reservoir snapshots.
//!
//! Layout:
//!
//! ```text
//! 0..4      magic "TCA1"
//! 4..12     manifest length, u64 little-endian
//! 12..      manifest, UTF-8 JSON: name -> {dtype, shape, offset, length}
//! payload   raw little-endian row-major buffers
//! ```
//!
//! The payload starts right after the manifest. Entry offsets are relative to
//! the payload start and are multiples of 64. The writer pads the manifest
//! with trailing spaces so the payload itself also starts on a 64-byte file
//! boundary. `utf8` entries hold `shape[0]` strings joined by `'\n'`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TcaError};
use crate::kernels::Matrix;
use crate::num::Scalar;

pub const MAGIC: &[u8; 4] = b"TCA1";
pub const ALIGN: usize = 64;
const HEADER: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I64,
    Utf8,
}

impl DType {
    fn elem_size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 => 8,
            DType::Utf8 => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::I64 => "i64",
            DType::Utf8 => "utf8",
        })
    }
}

/// One manifest record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    Utf8(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I64(_) => DType::I64,
            TensorData::Utf8(_) => DType::Utf8,
        }
    }

    fn encode(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::Utf8(v) => v.join("\n").into_bytes(),
        }
    }
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        match &tensor.data {
            TensorData::F32(v) if v.len() != element_count(&tensor.shape) => {
                return Err(TcaError::Archive(format!(
                    "{name}: {} values for shape {:?}",
                    v.len(),
                    tensor.shape
                )))
            }
            TensorData::I64(v) if v.len() != element_count(&tensor.shape) => {
                return Err(TcaError::Archive(format!(
                    "{name}: {} values for shape {:?}",
                    v.len(),
                    tensor.shape
                )))
            }
            TensorData::Utf8(v) => {
                if tensor.shape != [v.len()] {
                    return Err(TcaError::Archive(format!(
                        "{name}: string list shape must be [{}]",
                        v.len()
                    )));
                }
                if v.iter().any(|s| s.contains('\n')) {
                    return Err(TcaError::Archive(format!("{name}: strings may not contain newlines")));
                }
            }
            _ => {}
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.insert(
            name,
            Tensor {
                shape,
                data: TensorData::F32(data),
            },
        )
    }

    pub fn insert_i64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) -> Result<()> {
        self.insert(
            name,
            Tensor {
                shape,
                data: TensorData::I64(data),
            },
        )
    }

    pub fn insert_scalar_i64(&mut self, name: impl Into<String>, v: i64) -> Result<()> {
        self.insert_i64(name, vec![], vec![v])
    }

    pub fn insert_strings(&mut self, name: impl Into<String>, strings: Vec<String>) -> Result<()> {
        self.insert(
            name,
            Tensor {
                shape: vec![strings.len()],
                data: TensorData::Utf8(strings),
            },
        )
    }

    pub fn insert_matrix<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>) -> Result<()> {
        let data = m.as_slice().iter().map(|v| v.to_f32_lossy()).collect();
        self.insert_f32(name, vec![m.rows(), m.cols()], data)
    }

    pub fn insert_vector<T: Scalar>(&mut self, name: impl Into<String>, v: &[T]) -> Result<()> {
        let data = v.iter().map(|x| x.to_f32_lossy()).collect();
        self.insert_f32(name, vec![v.len()], data)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| TcaError::Archive(format!("missing entry {name}")))
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::F32(v) => Ok((&t.shape, v)),
            _ => Err(TcaError::Archive(format!("{name} is {}, expected f32", t.dtype()))),
        }
    }

    pub fn i64(&self, name: &str) -> Result<(&[usize], &[i64])> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::I64(v) => Ok((&t.shape, v)),
            _ => Err(TcaError::Archive(format!("{name} is {}, expected i64", t.dtype()))),
        }
    }

    /// A single-element i64 entry (shape `[]` or `[1]`).
    pub fn scalar_i64(&self, name: &str) -> Result<i64> {
        let (shape, v) = self.i64(name)?;
        if v.len() != 1 {
            return Err(TcaError::Archive(format!(
                "{name} has shape {shape:?}, expected a scalar"
            )));
        }
        Ok(v[0])
    }

    pub fn strings(&self, name: &str) -> Result<&[String]> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::Utf8(v) => Ok(v),
            _ => Err(TcaError::Archive(format!("{name} is {}, expected utf8", t.dtype()))),
        }
    }

    /// Two-dimensional f32 entry converted to `T`.
    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        let (shape, v) = self.f32(name)?;
        if shape.len() != 2 {
            return Err(TcaError::Archive(format!(
                "{name} has shape {shape:?}, expected a matrix"
            )));
        }
        Matrix::from_vec(shape[0], shape[1], v.iter().map(|&x| T::from_f32_lossy(x)).collect())
    }

    /// One-dimensional f32 entry converted to `T`.
    pub fn vector<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        let (shape, v) = self.f32(name)?;
        if shape.len() != 1 {
            return Err(TcaError::Archive(format!(
                "{name} has shape {shape:?}, expected a vector"
            )));
        }
        Ok(v.iter().map(|&x| T::from_f32_lossy(x)).collect())
    }

    /// Serializes to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = BTreeMap::new();
        let mut buffers = Vec::with_capacity(self.entries.len());
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let bytes = t.encode();
            manifest.insert(
                name.clone(),
                EntryMeta {
                    dtype: t.dtype(),
                    shape: t.shape.clone(),
                    offset: offset as u64,
                    length: bytes.len() as u64,
                },
            );
            offset = (offset + bytes.len()).next_multiple_of(ALIGN);
            buffers.push(bytes);
        }
        let mut json = serde_json::to_vec(&manifest)?;
        let padded = (HEADER + json.len()).next_multiple_of(ALIGN) - HEADER;
        json.resize(padded, b' ');

        let mut out = Vec::with_capacity(HEADER + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let payload_start = out.len();
        for (bytes, meta) in buffers.iter().zip(manifest.values()) {
            out.resize(payload_start + meta.offset as usize, 0);
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Parses and fully validates an archive.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let report = inspect(bytes);
        if let Some(first) = report.violations.first() {
            return Err(TcaError::Archive(first.clone()));
        }
        let payload = &bytes[report.payload_start..];
        let mut archive = Self::new();
        for (name, meta) in report.entries {
            let raw = &payload[meta.offset as usize..(meta.offset + meta.length) as usize];
            let data = match meta.dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::I64 => TensorData::I64(
                    raw.chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::Utf8 => TensorData::Utf8(split_strings(
                    std::str::from_utf8(raw).expect("validated by inspect"),
                    meta.shape[0],
                )),
            };
            archive.entries.insert(
                name,
                Tensor {
                    shape: meta.shape,
                    data,
                },
            );
        }
        Ok(archive)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_bytes(&bytes).map_err(|e| TcaError::Archive(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: TensorArchive) {
        self.entries.extend(other.entries);
    }
}

fn split_strings(s: &str, count: usize) -> Vec<String> {
    if count == 0 {
        Vec::new()
    } else {
        s.split('\n').map(str::to_owned).collect()
    }
}

/// Result of structural validation of raw archive bytes.
#[derive(Clone, Debug, Default)]
pub struct InspectReport {
    pub manifest_len: u64,
    pub payload_start: usize,
    pub entries: BTreeMap<String, EntryMeta>,
    pub violations: Vec<String>,
}

impl InspectReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Validates every layout invariant without trusting the manifest.
pub fn inspect(bytes: &[u8]) -> InspectReport {
    let mut report = InspectReport::default();
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        report.violations.push("bad magic: expected TCA1".into());
        return report;
    }
    let manifest_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    report.manifest_len = manifest_len;
    let Some(payload_start) = usize::try_from(manifest_len)
        .ok()
        .and_then(|m| m.checked_add(HEADER))
        .filter(|&end| end <= bytes.len())
    else {
        report
            .violations
            .push(format!("manifest overrun: {manifest_len} bytes declared"));
        return report;
    };
    report.payload_start = payload_start;
    let entries: BTreeMap<String, EntryMeta> = match serde_json::from_slice(&bytes[HEADER..payload_start]) {
        Ok(m) => m,
        Err(e) => {
            report.violations.push(format!("manifest is not valid JSON: {e}"));
            return report;
        }
    };
    let payload = &bytes[payload_start..];

    let mut ranges = Vec::new();
    for (name, meta) in &entries {
        let expected = element_count(&meta.shape) * meta.dtype.elem_size();
        if meta.dtype != DType::Utf8 && meta.length as usize != expected {
            report.violations.push(format!(
                "{name}: length {} does not match shape {:?} of {}",
                meta.length, meta.shape, meta.dtype
            ));
            continue;
        }
        if meta.dtype == DType::Utf8 && meta.shape.len() != 1 {
            report
                .violations
                .push(format!("{name}: utf8 entries must have a one-dimensional shape"));
            continue;
        }
        if meta.offset % ALIGN as u64 != 0 {
            report
                .violations
                .push(format!("{name}: offset {} is not 64-byte aligned", meta.offset));
        }
        let end = meta.offset.checked_add(meta.length);
        if end.is_none_or(|e| e > payload.len() as u64) {
            report.violations.push(format!(
                "{name}: payload overrun (offset {} + length {} > {})",
                meta.offset,
                meta.length,
                payload.len()
            ));
            continue;
        }
        let raw = &payload[meta.offset as usize..(meta.offset + meta.length) as usize];
        match meta.dtype {
            DType::F32 => {
                let bad = raw
                    .chunks_exact(4)
                    .filter(|c| !f32::from_le_bytes((*c).try_into().unwrap()).is_finite())
                    .count();
                if bad > 0 {
                    report.violations.push(format!("{name}: {bad} non-finite values"));
                }
            }
            DType::I64 => {}
            DType::Utf8 => match std::str::from_utf8(raw) {
                Ok(s) => {
                    let n = split_strings(s, meta.shape[0]).len();
                    if n != meta.shape[0] {
                        report
                            .violations
                            .push(format!("{name}: {n} strings for shape {:?}", meta.shape));
                    }
                }
                Err(_) => report.violations.push(format!("{name}: invalid UTF-8")),
            },
        }
        if meta.length > 0 {
            ranges.push((meta.offset, meta.offset + meta.length, name.clone()));
        }
    }
    ranges.sort();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            report.violations.push(format!("{} overlaps {}", w[0].2, w[1].2));
        }
    }
    report.entries = entries;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert_f32("w", vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-30, 7.25])
            .unwrap();
        a.insert_scalar_i64("meta/count", 3).unwrap();
        a.insert_strings("names", vec!["cat".into(), "dog".into()]).unwrap();
        a
    }

    #[test]
    fn layout_is_aligned_and_starts_with_magic() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let report = inspect(&bytes);
        assert!(report.is_valid(), "{:?}", report.violations);
        assert_eq!(report.payload_start % ALIGN, 0);
        for meta in report.entries.values() {
            assert_eq!(meta.offset % ALIGN as u64, 0);
        }
        assert_eq!(report.entries["w"].length, 24);
        assert_eq!(report.entries["names"].length, 7);
    }

    #[test]
    fn round_trip() {
        let a = sample();
        let b = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.scalar_i64("meta/count").unwrap(), 3);
        assert_eq!(b.strings("names").unwrap(), ["cat", "dog"]);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let report = inspect(&bytes[..bytes.len() - 3]);
        assert!(report.violations.iter().any(|v| v.contains("payload overrun")));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(TensorArchive::from_bytes(&bytes).is_err());
    }

    #[test]
    fn overlapping_entries_are_reported() {
        let mut a = TensorArchive::new();
        a.insert_f32("a", vec![1], vec![1.0]).unwrap();
        a.insert_f32("b", vec![1], vec![2.0]).unwrap();
        let bytes = a.to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        assert!(json.contains("\"offset\":64"));
        // same width, so the payload start does not move
        let patched = json.replacen("\"offset\":64", "\"offset\":0 ", 1);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + len..]);
        let report = inspect(&out);
        assert!(report.violations.iter().any(|v| v.contains("overlaps")));
    }

    #[test]
    fn shape_mismatch_is_rejected_on_insert() {
        let mut a = TensorArchive::new();
        assert!(a.insert_f32("x", vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn f32_buffers_round_trip_bitwise(
            v in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 0..200),
            labels in prop::collection::vec(any::<i64>(), 0..20),
        ) {
            let mut a = TensorArchive::new();
            a.insert_f32("x", vec![v.len()], v.clone()).unwrap();
            a.insert_i64("y", vec![labels.len()], labels.clone()).unwrap();
            let b = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
            let (_, got) = b.f32("x").unwrap();
            prop_assert_eq!(
                got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(b.i64("y").unwrap().1, &labels[..]);
        }
    }
}
