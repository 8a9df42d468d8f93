//! `TYT1` weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TYT1" | version: u32 = 1 | entry count: u32
//! per entry: name length: u32 | UTF-8 name | dtype: u8 (0 = f32, 1 = f64)
//!            | ndim: u32 | dims: ndim × u64 | row-major data
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::scalar::{Dtype, Real};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"TYT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {found:?}, expected \"TYT1\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("entry name is not valid UTF-8")]
    InvalidName,
    #[error("entry `{name}` declares {declared} elements but holds {actual}")]
    LengthMismatch {
        name: String,
        declared: usize,
        actual: usize,
    },
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("entry `{0}` not found")]
    Missing(String),
    #[error("entry `{name}` cannot be used as a tensor: {reason}")]
    NotATensor { name: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl EntryData {
    pub fn dtype(&self) -> Dtype {
        match self {
            EntryData::F32(_) => Dtype::F32,
            EntryData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bits_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (EntryData::F32(a), EntryData::F32(b)) => a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits())),
            (EntryData::F64(a), EntryData::F64(b)) => a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits())),
            _ => false,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            EntryData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            EntryData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    /// May be empty (a scalar) and may contain zero extents.
    pub dims: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: EntryData) -> Result<Self, ContainerError> {
        let name = name.into();
        let declared: usize = dims.iter().product();
        if declared != data.len() {
            return Err(ContainerError::LengthMismatch {
                name,
                declared,
                actual: data.len(),
            });
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &DenseTensor<T>) -> Self {
        let data = match T::DTYPE {
            Dtype::F32 => EntryData::F32(t.data().iter().map(|x| x.to_f32().unwrap()).collect()),
            Dtype::F64 => EntryData::F64(t.data().iter().map(|x| x.to_f64().unwrap()).collect()),
        };
        Self {
            name: name.into(),
            dims: t.dims().to_vec(),
            data,
        }
    }

    /// Converts to a tensor of element type `T`, casting if the dtype differs.
    pub fn to_tensor<T: Real>(&self) -> Result<DenseTensor<T>, ContainerError> {
        let values: Vec<T> = self.data.to_f64().into_iter().map(T::from_f64_lossy).collect();
        let dims = if self.dims.is_empty() { vec![1] } else { self.dims.clone() };
        DenseTensor::new(dims, values).map_err(|e| ContainerError::NotATensor {
            name: self.name.clone(),
            reason: e.to_string(),
        })
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.name == other.name && self.dims == other.dims && self.data.bits_eq(&other.data)
    }
}

#[derive(Debug, Clone, Default)]
pub struct WeightContainer {
    entries: Vec<Entry>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: Entry) -> Result<(), ContainerError> {
        if self.get(&entry.name).is_some() {
            return Err(ContainerError::DuplicateName(entry.name));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &DenseTensor<T>) -> Result<(), ContainerError> {
        self.push(Entry::from_tensor(name, t))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<DenseTensor<T>, ContainerError> {
        self.get(name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))?
            .to_tensor()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.bitwise_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.data.dtype() {
                Dtype::F32 => 0,
                Dtype::F64 => 1,
            });
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(ContainerError::BadMagic { found: magic.to_vec() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        let mut container = WeightContainer::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ContainerError::InvalidName)?
                .to_string();
            let dtype = match r.take(1)?[0] {
                0 => Dtype::F32,
                1 => Dtype::F64,
                other => return Err(ContainerError::BadDtype(other)),
            };
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(64));
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.truncated(usize::MAX))?;
            let nbytes = count.checked_mul(dtype.size()).ok_or_else(|| r.truncated(usize::MAX))?;
            let raw = r.take(nbytes)?;
            let data = match dtype {
                Dtype::F32 => EntryData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => EntryData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            container.push(Entry { name, dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(container)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn truncated(&self, needed: usize) -> ContainerError {
        ContainerError::Truncated {
            offset: self.pos,
            needed,
            available: self.bytes.len() - self.pos,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.truncated(n));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
