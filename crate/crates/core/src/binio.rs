//! Little-endian readers with byte-offset error reporting, and atomic writes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

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

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let offset = self.pos;
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset,
                expected: *expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = n.checked_mul(4).ok_or_else(|| FormatError::DimOverflow {
            offset: self.pos,
            reason: format!("{n} floats overflow the address space"),
        })?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.remaining() > 0 {
            return Err(FormatError::TrailingBytes {
                offset: self.pos,
                trailing: self.remaining(),
            });
        }
        Ok(())
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Multiplies dimensions read from a header, failing on overflow or zero.
pub(crate) fn checked_numel(offset: usize, dims: &[u32]) -> Result<usize, FormatError> {
    let mut n: usize = 1;
    for &d in dims {
        if d == 0 {
            return Err(FormatError::DimOverflow {
                offset,
                reason: format!("zero dimension in {dims:?}"),
            });
        }
        n = n
            .checked_mul(d as usize)
            .ok_or_else(|| FormatError::DimOverflow {
                offset,
                reason: format!("dimensions {dims:?} overflow"),
            })?;
    }
    Ok(n)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    // default is owner-only; outputs should get the usual umask-derived mode
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o666));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
