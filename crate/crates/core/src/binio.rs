//! Little-endian cursor helpers for the DNET and DBMP containers.

use crate::error::{FormatError, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
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

    pub fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension exceeds u32"));
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.f32(v);
        }
    }

    pub fn string(&mut self, s: &str) {
        self.usize(s.len());
        self.bytes(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(what.to_string()).into());
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Invalid(format!("{what}: absurd length {n}")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.usize(what)?;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Invalid(format!("{what}: invalid UTF-8")).into())
    }

    /// Checks the 4-byte magic and the version word, distinguishing a
    /// byte-swapped version from an unknown one.
    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: magic.to_vec(),
                found: found.to_vec(),
            }
            .into());
        }
        let v = self.u32("version")?;
        if v == version {
            Ok(())
        } else if v == version.swap_bytes() {
            Err(FormatError::EndiannessMismatch.into())
        } else {
            Err(FormatError::UnsupportedVersion {
                expected: version,
                found: v,
            }
            .into())
        }
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Invalid(format!(
                "{} trailing bytes after end of data",
                self.buf.len() - self.pos
            ))
            .into());
        }
        Ok(())
    }
}
