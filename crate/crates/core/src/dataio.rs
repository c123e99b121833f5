//! On-disk formats.
//!
//! Tensor file (little-endian throughout):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `EPGT` |
//! | 2 | version, `u16` = 1 |
//! | 1 | dtype: 0 = `f32`, 1 = `u8` |
//! | 1 | ndim |
//! | 4·ndim | dims, `u32` each |
//! | … | row-major payload |
//!
//! Tensor archive: magic `EPGA`, `u16` version 1, `u32` entry count, then per
//! entry a `u16` name length, UTF-8 name, and a complete tensor record.
//!
//! Manifest: one JSON object per line, see [`ManifestRecord`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraView;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const TENSOR_MAGIC: [u8; 4] = *b"EPGT";
pub const ARCHIVE_MAGIC: [u8; 4] = *b"EPGA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated data: need {needed} bytes, have {available}")]
    TruncatedPayload { needed: usize, available: usize },
    #[error("{0} unexpected bytes after the payload")]
    TrailingData(usize),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("line {line}: schema violation: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("line {line}: duplicate image id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: referenced file {path} does not exist")]
    DanglingPath { line: usize, path: PathBuf },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// 1-based manifest line of schema, duplicate and dangling-path errors.
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::SchemaViolation { line, .. } | Self::DuplicateId { line, .. } | Self::DanglingPath { line, .. } => {
                Some(*line)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Result<Self, DataError> {
        match code {
            0 => Ok(Self::F32),
            1 => Ok(Self::U8),
            c => Err(DataError::UnsupportedDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// N-dimensional row-major tensor. A tensor with no dims is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<u32>,
    data: TensorData,
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self, DataError> {
        if dims.len() > u8::MAX as usize {
            return Err(DataError::InvalidTensor(format!("{} dims exceed the 255 limit", dims.len())));
        }
        let n = element_count(&dims).ok_or_else(|| DataError::InvalidTensor("element count overflows".into()))?;
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        };
        if n != len {
            return Err(DataError::InvalidTensor(format!("dims {dims:?} need {n} values, got {len}")));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        let data = m.as_slice().iter().map(|v| v.as_f64() as f32).collect();
        Self { dims: vec![m.rows() as u32, m.cols() as u32], data: TensorData::F32(data) }
    }

    /// Reads a 2-D `f32` tensor as a matrix.
    pub fn to_matrix<T: Scalar>(&self) -> Result<Matrix<T>, DataError> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::F32(v), &[r, c]) => {
                Ok(Matrix::from_vec(r as usize, c as usize, v.iter().map(|&x| T::lit(x as f64)).collect()))
            }
            _ => Err(DataError::InvalidTensor(format!("expected a 2-D f32 tensor, found dims {:?}", self.dims))),
        }
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + self.payload_len());
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype() as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    fn payload_len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => 4 * v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    /// Decodes exactly one tensor; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader { bytes, pos: 0 };
        let t = Self::decode_from(&mut r)?;
        if r.pos != bytes.len() {
            return Err(DataError::TrailingData(bytes.len() - r.pos));
        }
        Ok(t)
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DataError> {
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != TENSOR_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(DataError::BadVersion(version));
        }
        let dtype = Dtype::from_code(r.u8()?)?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = element_count(&dims).ok_or_else(|| DataError::InvalidTensor("element count overflows".into()))?;
        let nbytes = n.checked_mul(dtype.size()).ok_or_else(|| DataError::InvalidTensor("payload overflows".into()))?;
        let payload = r.take(nbytes)?;
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
            Dtype::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(DataError::TruncatedPayload {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<(), DataError> {
    write_bytes(path, &tensor.encode())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, DataError> {
    Tensor::decode(&fs::read(path).map_err(|e| DataError::io(path, e))?)
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn encode(&self) -> Result<Vec<u8>, DataError> {
        let mut out = Vec::new();
        out.extend_from_slice(&ARCHIVE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| DataError::InvalidTensor("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| DataError::InvalidTensor(format!("entry name of {} bytes is too long", name.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.encode());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != ARCHIVE_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(DataError::BadVersion(version));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| DataError::InvalidTensor("entry name is not UTF-8".into()))?
                .to_string();
            entries.push((name, Tensor::decode_from(&mut r)?));
        }
        if r.pos != bytes.len() {
            return Err(DataError::TrailingData(bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }
}

pub fn write_archive(path: &Path, archive: &TensorArchive) -> Result<(), DataError> {
    write_bytes(path, &archive.encode()?)
}

pub fn read_archive(path: &Path) -> Result<TensorArchive, DataError> {
    TensorArchive::decode(&fs::read(path).map_err(|e| DataError::io(path, e))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Camera of one image: world-to-camera `r` (row-major), `t`, intrinsics `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub k: [f64; 9],
    pub w: u32,
    pub h: u32,
}

impl PoseRecord {
    pub fn from_view(v: &CameraView<f64>) -> Self {
        let flat = |m: &[[f64; 3]; 3]| {
            let mut o = [0.0; 9];
            for (i, v) in m.iter().flatten().enumerate() {
                o[i] = *v;
            }
            o
        };
        Self { r: flat(v.rotation()), t: *v.translation(), k: flat(v.intrinsics()), w: v.width(), h: v.height() }
    }

    pub fn to_view(&self) -> Result<CameraView<f64>, crate::geometry::GeometryError> {
        let m = |a: &[f64; 9]| [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]];
        CameraView::new(m(&self.r), self.t, m(&self.k), self.w, self.h)
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_id: String,
    pub instance_id: u64,
    pub category_id: u64,
    pub split: Split,
    pub feature_path: String,
    pub pose: Option<PoseRecord>,
    pub overlaps: Option<BTreeMap<String, f64>>,
    pub correspondences_path: Option<String>,
}

/// Validated manifest with an id lookup.
#[derive(Debug, Clone, Default)]
pub struct ManifestIndex {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    by_id: HashMap<String, usize>,
}

impl ManifestIndex {
    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.by_id.get(image_id).copied()
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestRecord> {
        self.position(image_id).map(|i| &self.records[i])
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Parses and validates a manifest; referenced files must exist.
pub fn load_manifest(path: &Path) -> Result<ManifestIndex, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut index = ManifestIndex { root, ..Default::default() };
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(raw)
            .map_err(|e| DataError::SchemaViolation { line, message: e.to_string() })?;
        if rec.image_id.is_empty() {
            return Err(DataError::SchemaViolation { line, message: "image_id is empty".into() });
        }
        if let Some(o) = &rec.overlaps {
            if let Some((id, v)) = o.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(DataError::SchemaViolation { line, message: format!("overlap {v} for {id} is outside [0, 1]") });
            }
        }
        if let Some(p) = &rec.pose {
            p.to_view().map_err(|e| DataError::SchemaViolation { line, message: format!("pose: {e}") })?;
        }
        for rel in std::iter::once(&rec.feature_path).chain(rec.correspondences_path.iter()) {
            let full = index.root.join(rel);
            if !full.is_file() {
                return Err(DataError::DanglingPath { line, path: full });
            }
        }
        if index.by_id.contains_key(&rec.image_id) {
            return Err(DataError::DuplicateId { line, id: rec.image_id });
        }
        index.by_id.insert(rec.image_id.clone(), index.records.len());
        index.records.push(rec);
    }
    Ok(index)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("manifest records serialize");
        buf.write_all(b"\n").expect("in-memory write");
    }
    write_bytes(path, &buf)
}

/// Correspondence file: partner image id → list of `[x1, y1, x2, y2]`.
pub type CorrespondenceFile = BTreeMap<String, Vec<[f64; 4]>>;

pub fn write_correspondences(path: &Path, c: &CorrespondenceFile) -> Result<(), DataError> {
    write_bytes(path, serde_json::to_string(c).expect("serializable").as_bytes())
}

pub fn read_correspondences(path: &Path) -> Result<CorrespondenceFile, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::SchemaViolation { line: e.line(), message: e.to_string() })
}
