//! Versioned little-endian binary framing shared by the database and model
//! checkpoint formats.
//!
//! ```text
//! offset  size  field
//! 0       8     magic
//! 8       4     version (u32)
//! 12      4     header length H (u32)
//! 16      8     payload length P (u64)
//! 24      4     CRC-32 of bytes [28, 28 + H + P)
//! 28      H     format-specific header fields
//! 28 + H  P     payload blocks
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

const PREAMBLE: usize = 28;

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn u32(&mut self, x: u32) -> &mut Self {
        self.buf.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn u64(&mut self, x: u64) -> &mut Self {
        self.buf.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn f64(&mut self, x: f64) -> &mut Self {
        self.buf.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, xs: &[f64]) -> &mut Self {
        self.buf.reserve(xs.len() * 8);
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            FormatError::Malformed(format!(
                "block overruns payload at offset {} (+{n} of {})",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> std::result::Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| FormatError::Malformed("block size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        self.take(n)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> std::result::Result<(), FormatError> {
        if self.remaining() != 0 {
            return Err(FormatError::Malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Serialises one frame.
pub fn encode(magic: &[u8; 8], version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut crc = crc32fast::Hasher::new();
    crc.update(header);
    crc.update(payload);
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Validates a frame and returns `(header, payload)`.
///
/// Checks run in a fixed order: preamble present, magic/version, declared
/// lengths against the file size, then the checksum.
pub fn decode<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    version: u32,
) -> std::result::Result<(&'a [u8], &'a [u8]), FormatError> {
    if bytes.len() < PREAMBLE {
        return Err(FormatError::Truncated {
            needed: PREAMBLE as u64,
            actual: bytes.len() as u64,
        });
    }
    let found_version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if &bytes[..8] != magic || found_version != version {
        return Err(FormatError::VersionMismatch {
            expected: format!("{} v{version}", String::from_utf8_lossy(magic).trim_end_matches('\0')),
            found: format!(
                "{} v{found_version}",
                String::from_utf8_lossy(&bytes[..8]).trim_end_matches('\0')
            ),
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    let payload_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let stored = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
    let needed = (PREAMBLE as u64)
        .checked_add(header_len)
        .and_then(|n| n.checked_add(payload_len))
        .ok_or_else(|| FormatError::Malformed("declared lengths overflow".into()))?;
    let actual = bytes.len() as u64;
    if actual < needed {
        return Err(FormatError::Truncated { needed, actual });
    }
    if actual > needed {
        return Err(FormatError::Malformed(format!("{} trailing bytes", actual - needed)));
    }
    let body = &bytes[PREAMBLE..];
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    Ok(body.split_at(header_len as usize))
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
