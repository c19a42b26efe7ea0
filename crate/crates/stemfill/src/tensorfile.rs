//! Shared binary container for named f32 tensors.
//!
//! Layout (all integers little-endian):
//! magic (4 bytes) | version u32 | meta_len u32 | meta JSON (UTF-8) |
//! tensor_count u32 | per tensor: name_len u32, name, dtype u8 (0 = f32),
//! ndim u32, dims u32 × ndim, data f32 × prod(dims).
//!
//! Used both for model checkpoints (magic `STWD`) and for serialized
//! dataset tensors.

use ndarray::ArrayD;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Checkpoint/tensor-file magic.
pub const MAGIC: [u8; 4] = *b"STWD";
/// Current format version.
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("truncated file at byte {0}")]
    Truncated(usize),
    #[error("invalid metadata JSON: {0}")]
    BadMeta(#[from] serde_json::Error),
    #[error("tensor `{0}` not found")]
    MissingTensor(String),
}

/// A parsed tensor container.
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl TensorFile {
    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>, TensorFileError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| TensorFileError::MissingTensor(name.to_string()))
    }
}

pub fn write(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, ArrayD<f32>)],
) -> Result<(), TensorFileError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(0u8); // f32
        let shape = t.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorFileError> {
        if self.pos + n > self.data.len() {
            return Err(TensorFileError::Truncated(self.pos));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, TensorFileError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read(path: &Path) -> Result<TensorFile, TensorFileError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    read_bytes(&data)
}

pub fn read_bytes(data: &[u8]) -> Result<TensorFile, TensorFileError> {
    let mut r = Reader { data, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(TensorFileError::BadMagic {
            expected: MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TensorFileError::BadVersion(version));
    }
    let meta_len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let dtype = r.take(1)?[0];
        if dtype != 0 {
            return Err(TensorFileError::BadDtype(dtype));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(shape, vals).expect("shape/product mismatch");
        tensors.push((name, arr));
    }
    Ok(TensorFile { meta, tensors })
}
