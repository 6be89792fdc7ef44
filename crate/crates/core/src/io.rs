//! Little-endian binary reading and writing shared by the dataset and
//! checkpoint formats. The reader tracks its byte offset so corruption
//! errors always carry the position where parsing stopped.

use crate::error::{CoreError, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn corrupt(&self, what: &str, detail: String) -> CoreError {
        CoreError::Corrupt { what: what.to_string(), offset: self.pos as u64, detail }
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(
                what,
                format!("wanted {n} bytes, {} left (truncated file)", self.buf.len() - self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes(16, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    /// A length read from the file, validated against what the buffer
    /// can still hold so corrupt sizes fail here instead of in an
    /// allocation.
    pub fn count(&mut self, what: &str, elem_bytes: usize) -> Result<usize> {
        let n = self.u32(what)? as usize;
        if n.saturating_mul(elem_bytes) > self.buf.len() - self.pos {
            return Err(self.corrupt(what, format!("count {n} exceeds remaining bytes")));
        }
        Ok(n)
    }

    pub fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.bytes(4 * n, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.count(what, 1)?;
        let raw = self.bytes(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|e| {
            CoreError::Corrupt {
                what: what.to_string(),
                offset: (self.pos - n) as u64,
                detail: format!("not utf-8: {e}"),
            }
        })
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        let got = self.bytes(4, what)?;
        if got != magic {
            return Err(CoreError::Corrupt {
                what: what.to_string(),
                offset: 0,
                detail: format!("bad magic {:?}, expected {:?}", got, magic),
            });
        }
        Ok(())
    }

    /// Every valid file is fully consumed; leftovers mean the file was
    /// written by something else or got concatenated.
    pub fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupt(what, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, vs: &[f32]) {
        self.buf.reserve(4 * vs.len());
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}
