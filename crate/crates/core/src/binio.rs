//! Little-endian cursor helpers shared by the TTAP and TTAE formats.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    UnsupportedVersion(u32),
    Truncated { needed: usize, available: usize },
    InvalidUtf8,
    OutOfRange(String),
    TrailingBytes(usize),
    Invalid(String),
}

/// Malformed binary input, located by byte offset.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct FormatError {
    pub format: &'static str,
    pub offset: usize,
    pub kind: FormatErrorKind,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at byte {}: ", self.format, self.offset)?;
        match &self.kind {
            FormatErrorKind::BadMagic { expected, found } => write!(
                f,
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(expected)
            ),
            FormatErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            FormatErrorKind::Truncated { needed, available } => write!(
                f,
                "truncated: needed {needed} bytes, {available} available"
            ),
            FormatErrorKind::InvalidUtf8 => write!(f, "invalid UTF-8 in name"),
            FormatErrorKind::OutOfRange(s) => write!(f, "value out of range: {s}"),
            FormatErrorKind::TrailingBytes(n) => write!(f, "{n} unexpected trailing bytes"),
            FormatErrorKind::Invalid(s) => write!(f, "{s}"),
        }
    }
}

pub(crate) struct Reader<'a> {
    format: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(format: &'static str, buf: &'a [u8]) -> Self {
        Self {
            format,
            buf,
            pos: 0,
        }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error(&self, offset: usize, kind: FormatErrorKind) -> FormatError {
        FormatError {
            format: self.format,
            offset,
            kind,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(self.error(
                self.pos,
                FormatErrorKind::Truncated {
                    needed: n,
                    available,
                },
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let at = self.pos;
        let found: [u8; 4] = self.take(4)?.try_into().expect("length 4");
        if &found != expected {
            return Err(self.error(
                at,
                FormatErrorKind::BadMagic {
                    expected: *expected,
                    found,
                },
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("length 4"),
        ))
    }

    pub fn i32(&mut self) -> Result<i32, FormatError> {
        Ok(i32::from_le_bytes(
            self.take(4)?.try_into().expect("length 4"),
        ))
    }

    pub fn string(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.error(at, FormatErrorKind::InvalidUtf8))
    }

    /// Reads `n` little-endian `f32` values, checking the length up front so
    /// a corrupt count fails before allocating.
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = n.checked_mul(4).ok_or_else(|| {
            self.error(self.pos, FormatErrorKind::OutOfRange(format!("{n} floats")))
        })?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("length 4")))
            .collect())
    }

    pub fn finish(self) -> Result<(), FormatError> {
        let rest = self.buf.len() - self.pos;
        if rest > 0 {
            return Err(self.error(self.pos, FormatErrorKind::TrailingBytes(rest)));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}
