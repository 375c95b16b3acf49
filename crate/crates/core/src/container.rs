//! Checksummed binary container shared by dataset bundles and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic           8 bytes
//! schema_version  u32
//! header_len      u64
//! header          header_len bytes of UTF-8 JSON
//! payload_len     u64
//! payload         payload_len bytes
//! checksum        32 bytes, SHA-256 of every preceding byte
//! ```
//!
//! Files are written to a temporary sibling and renamed into place so a
//! reader never observes a partially written container.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

const CHECKSUM_LEN: usize = 32;
const FIXED_PREFIX: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path} is truncated")]
    Truncated { path: PathBuf },
    #[error("checksum mismatch in {path}")]
    Checksum { path: PathBuf },
    #[error("schema version {found} in {path}, expected {expected}")]
    SchemaVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("malformed header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
}

pub(crate) fn encode(magic: &[u8; 8], version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut buf =
        Vec::with_capacity(FIXED_PREFIX + header.len() + 8 + payload.len() + CHECKSUM_LEN);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header);
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub(crate) fn decode(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 8],
    kind: &'static str,
    version: u32,
) -> Result<Container, ContainerError> {
    let truncated = || ContainerError::Truncated {
        path: path.to_path_buf(),
    };
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(ContainerError::BadMagic {
            path: path.to_path_buf(),
            expected: kind,
        });
    }
    if bytes.len() < FIXED_PREFIX + 8 + CHECKSUM_LEN {
        return Err(truncated());
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(ContainerError::Checksum {
            path: path.to_path_buf(),
        });
    }
    let found = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if found != version {
        return Err(ContainerError::SchemaVersion {
            path: path.to_path_buf(),
            found,
            expected: version,
        });
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = FIXED_PREFIX.checked_add(header_len).ok_or_else(truncated)?;
    if body.len() < header_end + 8 {
        return Err(truncated());
    }
    let payload_len =
        u64::from_le_bytes(body[header_end..header_end + 8].try_into().unwrap()) as usize;
    let payload_start = header_end + 8;
    if body.len() != payload_start + payload_len {
        return Err(truncated());
    }
    Ok(Container {
        header: body[FIXED_PREFIX..header_end].to_vec(),
        payload: body[payload_start..].to_vec(),
    })
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    let io = |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, ContainerError> {
    fs::read(path).map_err(|source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn f64s_to_le(values: impl IntoIterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a little-endian payload.
pub(crate) struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    pub(crate) fn is_exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTCONT";

    #[test]
    fn encode_decode_roundtrip() {
        let bytes = encode(MAGIC, 3, b"{\"a\":1}", &[1, 2, 3, 4]);
        let c = decode(Path::new("x"), &bytes, MAGIC, "test", 3).unwrap();
        assert_eq!(c.header, b"{\"a\":1}");
        assert_eq!(c.payload, vec![1, 2, 3, 4]);
    }

    #[test]
    fn flipped_byte_is_a_checksum_error() {
        let mut bytes = encode(MAGIC, 1, b"{}", &[9; 16]);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode(Path::new("x"), &bytes, MAGIC, "test", 1).unwrap_err();
        assert!(matches!(err, ContainerError::Checksum { .. }));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let bytes = encode(MAGIC, 2, b"{}", &[]);
        let err = decode(Path::new("x"), &bytes, MAGIC, "test", 1).unwrap_err();
        assert!(matches!(
            err,
            ContainerError::SchemaVersion {
                found: 2,
                expected: 1,
                ..
            }
        ));
    }

    #[test]
    fn wrong_magic() {
        let bytes = encode(b"OTHERMAG", 1, b"{}", &[]);
        assert!(matches!(
            decode(Path::new("x"), &bytes, MAGIC, "test", 1),
            Err(ContainerError::BadMagic { .. })
        ));
    }
}
