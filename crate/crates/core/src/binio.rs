//! Little-endian helpers shared by the binary containers (flow checkpoints,
//! backbone graphs): a bounds-checked reader and the named-tensor record
//! `u16 name_len | name | u8 rank | u32 dims… | raw payload`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::real::Real;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: &Path) -> Self {
        Self {
            buf,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                path: self.path.clone(),
                detail: format!("{what}: need {n} bytes at offset {}, {} left", self.pos, self.remaining()),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }
}

/// Named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NamedTensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

pub(crate) fn write_named<T: Real>(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[T]) {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

pub(crate) fn read_named<T: Real>(r: &mut ByteReader<'_>) -> Result<NamedTensor<T>> {
    let name_len = r.u16("tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
        .map_err(|_| r.corrupt("tensor name is not UTF-8"))?
        .to_string();
    let rank = r.u8("tensor rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32("tensor dims")? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.corrupt(format!("tensor {name}: element count overflows")))?;
    let width = T::PRECISION.byte_width();
    let bytes = count
        .checked_mul(width)
        .ok_or_else(|| r.corrupt(format!("tensor {name}: byte size overflows")))?;
    let payload = r.take(bytes, &format!("tensor {name} payload"))?;
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Ok(NamedTensor { name, dims, data })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temp file and renames, so readers never see a
/// partially written file.
pub(crate) fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
