//! `TNSR` tensor dumps: magic, little-endian `u32` rank and extents, then
//! `f32` values in row-major order.

use std::io::{Read, Write};

use ensembench_core::Tensor;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";

pub fn write_tnsr<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * (t.rank() + t.len()));
    write_tnsr(&mut out, t).expect("writing to memory");
    out
}

/// Counts bytes consumed so errors can name an offset.
pub(crate) struct Cursor<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R, offset: u64) -> Self {
        Cursor { inner, offset }
    }

    pub fn exact(&mut self, what: &'static str, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::format(what, self.offset, format!("expected {} more bytes ({})", buf.len(), e)))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(what, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    /// True when no bytes remain.
    pub fn at_end(&mut self) -> Result<bool> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(true),
            Ok(_) => Err(Error::format(
                "trailing data",
                self.offset,
                "unexpected bytes after the last record",
            )),
            Err(e) => Err(Error::format("read", self.offset, e.to_string())),
        }
    }
}

pub(crate) fn read_from<R: Read>(c: &mut Cursor<R>) -> Result<Tensor<f32>> {
    let start = c.offset;
    let mut magic = [0u8; 4];
    c.exact("TNSR magic", &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("TNSR magic", start, format!("found {:?}", magic)));
    }
    let rank = c.u32("TNSR rank")? as usize;
    if rank > 8 {
        return Err(Error::format(
            "TNSR rank",
            start + 4,
            format!("rank {} is implausible", rank),
        ));
    }
    let shape = (0..rank)
        .map(|_| c.u32("TNSR extent").map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    c.exact("TNSR values", &mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::from_vec(&shape, data)?)
}

pub fn read_tnsr<R: Read>(r: R) -> Result<Tensor<f32>> {
    read_from(&mut Cursor::new(r, 0))
}
