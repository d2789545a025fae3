//! The `.emb` file layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "AEMB"
//! 4..8    version u32 = 1
//! 8..16   row count u64
//! 16..20  dim u32
//! 20      dtype u8 = 0 (float32)
//! 21..24  zero padding
//! id table: per row, u32 byte length + UTF-8 bytes
//! payload: rows x dim float32, row-major, unpadded
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::{EmbeddingMatrix, MatrixError};
use crate::io_util::atomic_write;

pub const MAGIC: &[u8; 4] = b"AEMB";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: u64 },
    #[error("unsupported version {found} at offset {offset}")]
    UnsupportedVersion { offset: u64, found: u32 },
    #[error("unsupported dtype {found} at offset {offset}")]
    BadDtype { offset: u64, found: u8 },
    #[error("non-zero header padding at offset {offset}")]
    BadPadding { offset: u64 },
    #[error("zero dimension at offset {offset}")]
    ZeroDim { offset: u64 },
    #[error("truncated file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: u64, needed: u64 },
    #[error("row id is not valid UTF-8 at offset {offset}")]
    InvalidId { offset: u64 },
    #[error("duplicate row id {id:?} at offset {offset}")]
    DuplicateId { offset: u64, id: String },
    #[error("payload size does not match row count: {extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("matrix too large for this platform")]
    TooLarge,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FormatError {
    pub fn offset(&self) -> Option<u64> {
        match self {
            FormatError::BadMagic { offset }
            | FormatError::UnsupportedVersion { offset, .. }
            | FormatError::BadDtype { offset, .. }
            | FormatError::BadPadding { offset }
            | FormatError::ZeroDim { offset }
            | FormatError::Truncated { offset, .. }
            | FormatError::InvalidId { offset }
            | FormatError::DuplicateId { offset, .. }
            | FormatError::TrailingBytes { offset, .. } => Some(*offset),
            FormatError::TooLarge | FormatError::Io(_) => None,
        }
    }
}

/// Serializes a matrix into `w`.
pub fn write_matrix<W: Write>(m: &EmbeddingMatrix, mut w: W) -> io::Result<()> {
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(MAGIC);
    header[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    header[8..16].copy_from_slice(&(m.rows() as u64).to_le_bytes());
    header[16..20].copy_from_slice(&(m.dim() as u32).to_le_bytes());
    header[20] = DTYPE_F32;
    w.write_all(&header)?;
    for id in m.ids() {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    let mut payload = Vec::with_capacity(m.data().len() * 4);
    for v in m.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.flush()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated { offset: self.pos as u64, needed: n as u64 });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a complete `.emb` byte buffer.
pub fn read_matrix(bytes: &[u8]) -> Result<EmbeddingMatrix, FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(FormatError::BadMagic { offset: 0 });
    }
    cur.take(4)?;
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { offset: 4, found: version });
    }
    let rows = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
    let dim = cur.u32()?;
    let dtype = cur.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(FormatError::BadDtype { offset: 20, found: dtype });
    }
    if cur.take(3)?.iter().any(|&b| b != 0) {
        return Err(FormatError::BadPadding { offset: 21 });
    }
    if dim == 0 {
        return Err(FormatError::ZeroDim { offset: 16 });
    }
    let rows = usize::try_from(rows).map_err(|_| FormatError::TooLarge)?;
    let dim = dim as usize;

    // Every id needs at least its 4-byte length prefix.
    if rows > (bytes.len() - cur.pos) / 4 {
        return Err(FormatError::Truncated { offset: cur.pos as u64, needed: (rows as u64).saturating_mul(4) });
    }
    let mut ids = Vec::with_capacity(rows);
    let mut seen = std::collections::HashSet::with_capacity(rows);
    for _ in 0..rows {
        let start = cur.pos;
        let len = cur.u32()? as usize;
        let raw = cur.take(len)?;
        let id = std::str::from_utf8(raw).map_err(|_| FormatError::InvalidId { offset: start as u64 + 4 })?;
        if !seen.insert(id) {
            return Err(FormatError::DuplicateId { offset: start as u64, id: id.to_string() });
        }
        ids.push(id.to_string());
    }

    let payload_len = rows.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or(FormatError::TooLarge)?;
    let payload_start = cur.pos;
    let payload = cur.take(payload_len)?;
    let extra = bytes.len() - cur.pos;
    if extra != 0 {
        return Err(FormatError::TrailingBytes { offset: (payload_start + payload_len) as u64, extra: extra as u64 });
    }
    let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    EmbeddingMatrix::new(ids, dim, data).map_err(|e| match e {
        // Already checked above; kept for completeness.
        MatrixError::DuplicateId(id) => FormatError::DuplicateId { offset: HEADER_LEN as u64, id },
        _ => FormatError::Truncated { offset: payload_start as u64, needed: payload_len as u64 },
    })
}

pub fn save_matrix(m: &EmbeddingMatrix, path: &Path) -> io::Result<()> {
    let mut buf = Vec::new();
    write_matrix(m, &mut buf)?;
    atomic_write(path, &buf)
}

pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix, FormatError> {
    let bytes = fs::read(path)?;
    read_matrix(&bytes)
}
