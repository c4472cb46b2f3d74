//! Binary archive of named `f32` tensors.
//!
//! The archive is a sequence of records, each laid out little-endian as
//! `u32 name_len, name bytes (UTF-8), u32 rank, rank x u32 dims, f32 payload`,
//! and ends at end of file.

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub fn write_named<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> std::io::Result<()> {
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TensorError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_named<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| TensorError::Format(e.to_string()))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| TensorError::Format(e.to_string()))?
            .to_string();
        let rank = c.u32()?;
        if rank > 8 {
            return Err(TensorError::Format(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| TensorError::Format(format!("tensor {name} is too large")))?;
        let bytes = c.take(numel.checked_mul(4).ok_or_else(|| TensorError::Format("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
