//! Byte-level framing shared by the `.tskb` and `.tsck` files.
//!
//! Every file starts with a four-byte magic and a little-endian `u16` format
//! version and ends with the CRC-64/XZ of all preceding bytes, stored as a
//! little-endian `u64`.

use crc::{Crc, CRC_64_XZ};

use crate::error::FormatError;

pub const CHECKSUM_LEN: usize = 8;

pub fn checksum(bytes: &[u8]) -> u64 {
    Crc::<u64>::new(&CRC_64_XZ).checksum(bytes)
}

/// Append-only encoder.
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// A `u32` length followed by the bytes.
    pub fn block(&mut self, bytes: &[u8]) {
        self.u32(bytes.len() as u32);
        self.buf.extend_from_slice(bytes);
    }

    /// Appends the checksum and returns the file contents.
    pub fn finish(mut self) -> Vec<u8> {
        let sum = checksum(&self.buf);
        self.u64(sum);
        self.buf
    }
}

/// Bounds-checked decoder over a whole file.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor after them.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], supported: u16) -> Result<Self, FormatError> {
        let mut r = Self { bytes, pos: 0 };
        let found = r.take(4)?;
        if found != magic {
            return Err(FormatError::BadMagic {
                found: found.try_into().expect("four bytes"),
                expected: *magic,
            });
        }
        let version = r.u16()?;
        if version != supported {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    /// Fails with [`FormatError::Truncated`] unless `n` more bytes plus the
    /// trailing checksum are present.
    pub fn require(&self, n: u64) -> Result<(), FormatError> {
        let needed = (self.pos as u64).saturating_add(n).saturating_add(CHECKSUM_LEN as u64);
        if needed > self.bytes.len() as u64 {
            return Err(FormatError::Truncated {
                needed: needed.min(usize::MAX as u64) as usize,
                available: self.bytes.len(),
            });
        }
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    pub fn block(&mut self) -> Result<&'a [u8], FormatError> {
        let n = self.u32()?;
        self.require(n as u64)?;
        self.take(n as usize)
    }

    /// Verifies that exactly the checksum remains and that it matches.
    pub fn finish(mut self) -> Result<(), FormatError> {
        let body = self.pos;
        let stored = self.u64()?;
        if self.pos != self.bytes.len() {
            return Err(FormatError::TrailingBytes {
                extra: self.bytes.len() - self.pos,
            });
        }
        let computed = checksum(&self.bytes[..body]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        Ok(())
    }
}
