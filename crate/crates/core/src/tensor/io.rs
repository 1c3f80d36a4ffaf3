//! `KJT1` binary tensor container.
//!
//! Layout: magic `KJT1`, one dtype byte (0 = f32, 1 = f64), rank as u32 LE,
//! `rank` extents as u32 LE, then the elements in row-major order, little
//! endian.

use super::{numel, DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const KJT1_MAGIC: &[u8; 4] = b"KJT1";

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(KJT1_MAGIC);
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Cursor over a byte buffer that reports absolute offsets in errors.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let start = self.pos;
        if self.take(4, "tensor magic")? != KJT1_MAGIC {
            return Err(self.fail(start, "bad tensor magic, expected KJT1"));
        }
        let tag_at = self.pos;
        let tag = self.u8("dtype tag")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| self.fail(tag_at, format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(self.fail(tag_at, format!("dtype {dtype:?} does not match expected {:?}", T::DTYPE)));
        }
        let rank = self.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let at = self.pos;
            let d = self.u32("extent")? as usize;
            if d == 0 {
                return Err(self.fail(at, "zero extent"));
            }
            shape.push(d);
        }
        let n = numel(&shape);
        let size = dtype.size();
        let bytes = self.take(n * size, "tensor data")?;
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(&shape, data)
    }
}

pub fn read_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes);
    let t = r.tensor()?;
    if !r.at_end() {
        return Err(r.fail(r.pos(), "trailing bytes after tensor"));
    }
    Ok(t)
}
