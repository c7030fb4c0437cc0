//! Binary tensor container shared by model checkpoints and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SPCK"
//! version u32 = 1
//! count   u32
//! count × {
//!     name_len u32, name (UTF-8, name_len bytes)
//!     ndim u32, dims u64 × ndim
//!     dtype u8 (0 = f32, 1 = f64)
//!     data  prod(dims) little-endian values of dtype
//! }
//! ```
//!
//! Tensors are written in the order given and read back in file order, so a
//! load/save round trip reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autograd::Matrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u32 = 1;

/// Element type stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

/// One stored tensor. Rank-1 tensors load as `1×n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_matrix(name: &str, m: &Matrix, dtype: DType) -> Self {
        NamedTensor {
            name: name.to_string(),
            dims: vec![m.rows as u64, m.cols as u64],
            dtype,
            data: m.data.clone(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            d => {
                return Err(Error::Shape(format!(
                    "tensor {} has rank {}, expected 1 or 2",
                    self.name,
                    d.len()
                )))
            }
        };
        Ok(Matrix::from_vec(r, c, self.data.clone()))
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(t.dtype.tag());
        match t.dtype {
            DType::F32 => t.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            DType::F64 => t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(
                self.path,
                format!("byte {}", self.pos),
                format!("truncated container: need {n} more bytes"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::parse(path, "byte 0", "bad magic, not a tensor container"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(path, "byte 4", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::parse(path, format!("byte {at}"), "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n: u64 = dims.iter().product();
        let dtype = match r.take(1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            t => {
                return Err(Error::parse(
                    path,
                    format!("byte {}", r.pos - 1),
                    format!("unknown dtype tag {t} for tensor {name}"),
                ))
            }
        };
        let data = match dtype {
            DType::F32 => r
                .take(n as usize * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => r
                .take(n as usize * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        out.push(NamedTensor { name, dims, dtype, data });
    }
    if r.pos != buf.len() {
        return Err(Error::parse(path, format!("byte {}", r.pos), "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(tensors);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Name → matrix view of a decoded container.
pub fn to_map(tensors: &[NamedTensor]) -> Result<BTreeMap<String, Matrix>> {
    tensors.iter().map(|t| Ok((t.name.clone(), t.to_matrix()?))).collect()
}
