//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `magic[8] | version u32 | payload_len u64 | sha256(payload)[32] | payload`.
//! The payload is `meta_len u64 | meta JSON | n_arrays u32 | arrays`, each
//! array being `name_len u16 | name | dtype u8 | ndim u8 | dims u64… | data`.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"IVLCKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("array {name}: stored shape {stored:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("array {name} stored as {stored}, cannot load as {wanted}")]
    Dtype {
        name: String,
        stored: &'static str,
        wanted: &'static str,
    },
    #[error("checkpoint has no array named {0}")]
    Missing(String),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data: ArrayData::F64(data),
        }
    }

    /// Stores a model tensor at its native width.
    pub fn tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = if std::mem::size_of::<T>() == 4 {
            ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect())
        } else {
            ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect())
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Loads as a tensor of the requested shape. `f32` data widens to `f64`
    /// losslessly; the reverse is refused.
    pub fn to_tensor<T: Element>(&self, expected: &[usize]) -> Result<Tensor<T>, CheckpointError> {
        if self.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: self.name.clone(),
                stored: self.shape.clone(),
                expected: expected.to_vec(),
            });
        }
        let wide = std::mem::size_of::<T>() == 8;
        let data: Vec<T> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            ArrayData::F64(v) if wide => v.iter().map(|&x| T::of(x)).collect(),
            ArrayData::F64(_) => {
                return Err(CheckpointError::Dtype {
                    name: self.name.clone(),
                    stored: "f64",
                    wanted: "f32",
                })
            }
        };
        Tensor::new(expected.to_vec(), data).map_err(|e| CheckpointError::Meta(e.to_string()))
    }

    pub fn as_f64(&self) -> Result<Vec<f64>, CheckpointError> {
        match &self.data {
            ArrayData::F64(v) => Ok(v.clone()),
            other => Err(CheckpointError::Dtype {
                name: self.name.clone(),
                stored: other.dtype(),
                wanted: "f64",
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray, CheckpointError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        payload.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        payload.extend_from_slice(&meta);
        payload.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
            payload.extend_from_slice(name);
            payload.push(a.data.tag());
            payload.push(a.shape.len() as u8);
            for &d in &a.shape {
                payload.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::CorruptHeader(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("file shorter than header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                supported: VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(CheckpointError::CorruptHeader(format!(
                "payload length {} does not match header {len}",
                payload.len()
            )));
        }
        if Sha256::digest(payload).as_slice() != &bytes[20..52] {
            return Err(corrupt("payload digest mismatch"));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let meta_len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("array name is not UTF-8"))?;
            let tag = r.u8()?;
            let ndim = r.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("array too large"))?;
            let data = match tag {
                0 => ArrayData::F32(
                    r.take(count.checked_mul(4).ok_or_else(|| corrupt("array too large"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => ArrayData::F64(
                    r.take(count.checked_mul(8).ok_or_else(|| corrupt("array too large"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                t => return Err(CheckpointError::CorruptHeader(format!("unknown dtype tag {t}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != payload.len() {
            return Err(corrupt("trailing bytes after last array"));
        }
        Ok(Self { meta, arrays })
    }

    /// Writes to a sibling temp file and renames, so readers never observe a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::CorruptHeader("payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
