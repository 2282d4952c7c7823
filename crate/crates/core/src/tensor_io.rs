//! Portable binary tensor files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "VTNS" | version | rank | dim_0 .. dim_{rank-1} | f32 LE data, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"VTNS";
pub const TENSOR_VERSION: u32 = 1;

/// Reader that tracks its byte offset so format errors can point at it.
pub struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: self.offset,
            detail: format!("truncated while reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    /// True when no bytes remain.
    pub fn at_eof(&mut self) -> bool {
        let mut b = [0u8; 1];
        matches!(self.inner.read(&mut b), Ok(0))
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub fn read_tensor<R: Read>(r: &mut CountingReader<R>) -> Result<Tensor> {
    let start = r.offset();
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format { offset: start, detail: format!("bad tensor magic {magic:?}") });
    }
    let at = r.offset();
    let version = r.read_u32("tensor version")?;
    if version != TENSOR_VERSION {
        return Err(Error::Format { offset: at, detail: format!("unsupported tensor version {version}") });
    }
    let at = r.offset();
    let rank = r.read_u32("tensor rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format { offset: at, detail: format!("implausible rank {rank}") });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = r.offset();
        let d = r.read_u32("tensor dim")? as usize;
        if d == 0 {
            return Err(Error::Format { offset: at, detail: "zero-sized dimension".into() });
        }
        shape.push(d);
    }
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format {
        offset: at,
        detail: "element count overflows".into(),
    })?;
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact_at(&mut bytes, "tensor data")?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = CountingReader::new(BufReader::new(f));
    read_tensor(&mut r)
}
