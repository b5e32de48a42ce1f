//! Little-endian byte reader and writer shared by every binary format in the
//! crate (model containers, tensors, proofs, protocol payloads, records).

use alloc::vec::Vec;

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

/// Largest tensor rank accepted by decoders.
pub const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated input: needed {needed} more bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{count} trailing bytes after the encoded value")]
    TrailingBytes { count: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("invalid {what}: {value}")]
    Invalid { what: &'static str, value: u64 },
}

impl DecodeError {
    pub(crate) fn invalid(what: &'static str, value: impl Into<u64>) -> Self {
        DecodeError::Invalid {
            what,
            value: value.into(),
        }
    }
}

/// Cursor over a borrowed byte slice. Every read is bounds-checked.
#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if n > self.remaining() {
            return Err(DecodeError::Truncated {
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    /// Reads a u32 element count and checks that at least `count * min_item`
    /// bytes remain, so corrupt counts cannot trigger huge allocations.
    pub fn count(&mut self, min_item: usize) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        let needed = n.saturating_mul(min_item.max(1));
        if min_item > 0 && needed > self.remaining() {
            return Err(DecodeError::Truncated {
                needed,
                available: self.remaining(),
            });
        }
        Ok(n)
    }

    pub fn shape(&mut self) -> Result<Shape, DecodeError> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(DecodeError::invalid("tensor rank", rank as u64));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u32()?;
            if d == 0 {
                return Err(DecodeError::invalid("tensor dimension", d));
            }
            dims.push(d as usize);
        }
        Shape::new(dims).map_err(|_| DecodeError::invalid("tensor shape", rank as u64))
    }

    /// Tensor record: shape (u32 rank, u32 dims) followed by raw f32 LE data.
    pub fn tensor(&mut self) -> Result<Tensor, DecodeError> {
        let shape = self.shape()?;
        let len = shape.len();
        let bytes = len
            .checked_mul(4)
            .ok_or(DecodeError::invalid("tensor size", len as u64))?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            count => Err(DecodeError::TrailingBytes { count }),
        }
    }
}

/// Append-only little-endian writer.
#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    /// Writes a `usize` as u32. Callers only pass values bounded by
    /// in-memory collection sizes.
    pub fn len32(&mut self, v: usize) -> &mut Self {
        self.u32(u32::try_from(v).expect("length exceeds u32"))
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn shape(&mut self, shape: &Shape) -> &mut Self {
        self.len32(shape.rank());
        for &d in shape.dims() {
            self.len32(d);
        }
        self
    }

    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.shape(t.shape());
        self.buf.reserve(t.len() * 4);
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }
}

/// Size in bytes of a tensor record.
pub fn tensor_record_len(t: &Tensor) -> usize {
    4 + 4 * t.shape().rank() + 4 * t.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tensor_record_golden_bytes() {
        let t = Tensor::new(Shape::new(vec![2]).unwrap(), vec![1.0, -2.0]).unwrap();
        let mut w = Writer::new();
        w.tensor(&t);
        let bytes = w.into_bytes();
        assert_eq!(
            bytes,
            [
                1, 0, 0, 0, // rank
                2, 0, 0, 0, // dim
                0x00, 0x00, 0x80, 0x3f, // 1.0
                0x00, 0x00, 0x00, 0xc0, // -2.0
            ]
        );
        assert_eq!(bytes.len(), tensor_record_len(&t));
        let mut r = Reader::new(&bytes);
        assert_eq!(r.tensor().unwrap(), t);
        r.finish().unwrap();
    }

    #[test]
    fn rejects_zero_dimension_and_huge_rank() {
        let mut r = Reader::new(&[1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(r.tensor(), Err(DecodeError::Invalid { .. })));
        let mut r = Reader::new(&[200, 0, 0, 0]);
        assert!(matches!(r.tensor(), Err(DecodeError::Invalid { .. })));
    }

    #[test]
    fn huge_dims_fail_as_truncation_not_allocation() {
        let mut w = Writer::new();
        w.u32(2).u32(u32::MAX).u32(u32::MAX);
        let bytes = w.into_bytes();
        assert!(Reader::new(&bytes).tensor().is_err());
    }

    #[test]
    fn count_guards_against_oversized_claims() {
        let mut w = Writer::new();
        w.u32(1_000_000);
        let bytes = w.into_bytes();
        assert!(matches!(
            Reader::new(&bytes).count(8),
            Err(DecodeError::Truncated { .. })
        ));
    }
}
