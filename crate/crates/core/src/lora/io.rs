//! `.lora` adapter files (little-endian):
//!
//! ```text
//! magic "ALRA" | version u32 | head name (u32 len + UTF-8)
//! d_in u32 | d_out u32 | r u32 | alpha f32 | dropout f32 | seed u64
//! training-config digest (32 bytes, SHA-256)
//! A (r x d_in f32, row-major) | B (d_out x r f32, row-major)
//! ```

use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::{HeadKind, LoraAdapter, LoraError};
use crate::io_util::atomic_write;

pub const ADAPTER_MAGIC: &[u8; 4] = b"ALRA";
pub const ADAPTER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AdapterFormatError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: u64 },
    #[error("unsupported adapter file version {found} (expected {ADAPTER_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("unknown head name {name:?} at offset {offset}")]
    UnknownHead { offset: u64, name: String },
    #[error("truncated file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: u64, needed: u64 },
    #[error("invalid adapter at offset {offset}: {source}")]
    Invalid {
        offset: u64,
        #[source]
        source: LoraError,
    },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFile {
    pub head: HeadKind,
    pub adapter: LoraAdapter,
    pub config_digest: [u8; 32],
}

pub fn write_adapter(file: &AdapterFile) -> Vec<u8> {
    let ad = &file.adapter;
    let name = file.head.name().as_bytes();
    let mut out = Vec::new();
    out.extend_from_slice(ADAPTER_MAGIC);
    out.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name);
    for d in [ad.d_in(), ad.d_out(), ad.rank()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&ad.alpha().to_le_bytes());
    out.extend_from_slice(&ad.dropout_p().to_le_bytes());
    out.extend_from_slice(&ad.seed().to_le_bytes());
    out.extend_from_slice(&file.config_digest);
    for v in ad.a().iter().chain(ad.b().iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AdapterFormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(AdapterFormatError::Truncated { offset: self.pos as u64, needed: n as u64 });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N], AdapterFormatError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32, AdapterFormatError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f32>, AdapterFormatError> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or(AdapterFormatError::Truncated { offset: self.pos as u64, needed: u64::MAX })?;
        let raw = self.take(n)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }
}

pub fn read_adapter(bytes: &[u8]) -> Result<AdapterFile, AdapterFormatError> {
    if bytes.len() < 4 || &bytes[..4] != ADAPTER_MAGIC {
        return Err(AdapterFormatError::BadMagic { offset: 0 });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != ADAPTER_VERSION {
        return Err(AdapterFormatError::UnsupportedVersion { found: version });
    }
    let name_at = r.pos as u64;
    let len = r.u32()? as usize;
    let name = String::from_utf8_lossy(r.take(len)?).into_owned();
    let head: HeadKind = name.parse().map_err(|_| AdapterFormatError::UnknownHead { offset: name_at, name })?;
    let dims_at = r.pos as u64;
    let d_in = r.u32()? as usize;
    let d_out = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let alpha = f32::from_le_bytes(r.arr()?);
    let dropout = f32::from_le_bytes(r.arr()?);
    let seed = u64::from_le_bytes(r.arr()?);
    let config_digest: [u8; 32] = r.arr()?;
    let a = r.f32_matrix(rank, d_in)?;
    let b = r.f32_matrix(d_out, rank)?;
    if r.pos != bytes.len() {
        return Err(AdapterFormatError::TrailingBytes { offset: r.pos as u64, extra: (bytes.len() - r.pos) as u64 });
    }
    let adapter = LoraAdapter::from_parts(a, b, alpha, dropout, seed)
        .map_err(|source| AdapterFormatError::Invalid { offset: dims_at, source })?;
    Ok(AdapterFile { head, adapter, config_digest })
}

pub fn save_adapter(file: &AdapterFile, path: &Path) -> io::Result<()> {
    atomic_write(path, &write_adapter(file))
}

pub fn load_adapter(path: &Path) -> Result<AdapterFile, AdapterFormatError> {
    read_adapter(&fs::read(path)?)
}
