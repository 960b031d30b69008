//! The single binary container codec shared by checkpoint files ("LXSC") and
//! plain tensor files ("LXSW").
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes
//! format_version   u32
//! metadata_length  u64
//! metadata         UTF-8 JSON, metadata_length bytes
//! payload          tensor bytes, row-major, in metadata order
//! checksum         32-byte SHA-256 over the payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::sha256;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC_CHECKPOINT: [u8; 4] = *b"LXSC";
pub const MAGIC_WEIGHTS: [u8; 4] = *b"LXSW";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: u64 = 4 + 4 + 8;
const CHECKSUM_LEN: u64 = 32;

/// Element type used for tensor payloads on disk. In-memory math is always
/// f64; f32 storage trades bit-exactness for half the bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    F32,
    F64,
}

impl StorageDtype {
    pub fn bytes(self) -> usize {
        match self {
            StorageDtype::F32 => 4,
            StorageDtype::F64 => 8,
        }
    }
}

impl std::fmt::Display for StorageDtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StorageDtype::F32 => write!(f, "f32"),
            StorageDtype::F64 => write!(f, "f64"),
        }
    }
}

impl std::str::FromStr for StorageDtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(StorageDtype::F32),
            "f64" => Ok(StorageDtype::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32|f64)")),
        }
    }
}

/// Appends a matrix to a payload buffer in the given dtype.
/// f32 storage rejects values whose magnitude does not fit.
pub(crate) fn encode_matrix(payload: &mut Vec<u8>, m: &Matrix, dtype: StorageDtype) -> Result<()> {
    for &x in m.data() {
        match dtype {
            StorageDtype::F64 => payload.extend_from_slice(&x.to_le_bytes()),
            StorageDtype::F32 => {
                let narrowed = x as f32;
                if !narrowed.is_finite() {
                    return Err(Error::DtypeOverflow { value: x });
                }
                payload.extend_from_slice(&narrowed.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// Decodes `rows * cols` values from `bytes`, rejecting non-finite entries.
pub(crate) fn decode_matrix(
    bytes: &[u8],
    rows: usize,
    cols: usize,
    dtype: StorageDtype,
) -> Result<Matrix> {
    let expected = rows * cols * dtype.bytes();
    if bytes.len() != expected {
        return Err(Error::Format {
            reason: format!(
                "tensor region is {} bytes, expected {expected} for {rows}x{cols} {dtype}",
                bytes.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    match dtype {
        StorageDtype::F64 => {
            for chunk in bytes.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        StorageDtype::F32 => {
            for chunk in bytes.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
    }
    Matrix::new(rows, cols, data).map_err(|e| Error::Format {
        reason: format!("invalid tensor data: {e}"),
    })
}

/// A parsed container file.
pub(crate) struct RawContainer {
    pub metadata: Vec<u8>,
    pub payload: Vec<u8>,
    pub checksum: [u8; 32],
}

/// Serializes and atomically writes a container; returns the payload checksum.
pub(crate) fn write_container(
    path: &Path,
    magic: [u8; 4],
    metadata: &[u8],
    payload: &[u8],
) -> Result<[u8; 32]> {
    let checksum = sha256(payload);
    let mut bytes = Vec::with_capacity(HEADER_LEN as usize + metadata.len() + payload.len() + 32);
    bytes.extend_from_slice(&magic);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    bytes.extend_from_slice(metadata);
    bytes.extend_from_slice(payload);
    bytes.extend_from_slice(&checksum);
    atomic_write(path, &bytes)?;
    Ok(checksum)
}

/// Writes via a temp file in the destination directory plus rename, so a
/// partially written file is never observable under the final name.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Reads and validates a container: magic, version, bounds and the payload
/// checksum. Truncated or malformed files come back as format errors, a bad
/// checksum as an integrity error naming the payload byte range.
pub(crate) fn read_container(path: &Path, expected_magic: [u8; 4]) -> Result<RawContainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_container(&bytes, expected_magic)
}

pub(crate) fn parse_container(bytes: &[u8], expected_magic: [u8; 4]) -> Result<RawContainer> {
    let min_len = (HEADER_LEN + CHECKSUM_LEN) as usize;
    if bytes.len() < min_len {
        return Err(Error::Format {
            reason: format!(
                "file is {} bytes, below the {min_len}-byte minimum",
                bytes.len()
            ),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != expected_magic {
        return Err(Error::Format {
            reason: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expected_magic)
            ),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            reason: format!("unsupported format version {version}"),
        });
    }
    let metadata_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = HEADER_LEN
        .checked_add(metadata_len)
        .ok_or_else(|| Error::Format {
            reason: "metadata length overflows".into(),
        })?;
    let payload_end = (bytes.len() as u64).checked_sub(CHECKSUM_LEN).unwrap();
    if payload_start > payload_end {
        return Err(Error::Format {
            reason: format!(
                "metadata length {metadata_len} leaves no room for payload and checksum"
            ),
        });
    }
    let metadata = bytes[HEADER_LEN as usize..payload_start as usize].to_vec();
    let payload = bytes[payload_start as usize..payload_end as usize].to_vec();
    let stored: [u8; 32] = bytes[payload_end as usize..].try_into().unwrap();
    let computed = sha256(&payload);
    if stored != computed {
        return Err(Error::Integrity {
            offset: payload_start,
            end: payload_end,
        });
    }
    Ok(RawContainer {
        metadata,
        payload,
        checksum: stored,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorsMeta {
    format_version: u32,
    storage_dtype: StorageDtype,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: u64,
    cols: u64,
    offset: u64,
    len: u64,
}

/// Writes named matrices to an "LXSW" tensor file; returns the payload
/// checksum. Used for single weight matrices and for SVD factor bundles.
pub fn save_tensors(
    path: &Path,
    tensors: &[(&str, &Matrix)],
    dtype: StorageDtype,
) -> Result<[u8; 32]> {
    if tensors.is_empty() {
        return Err(Error::Param {
            name: "tensors",
            reason: "at least one tensor required".into(),
        });
    }
    let mut payload = Vec::new();
    let mut metas = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let offset = payload.len() as u64;
        encode_matrix(&mut payload, m, dtype)?;
        metas.push(TensorMeta {
            name: (*name).to_string(),
            rows: m.rows() as u64,
            cols: m.cols() as u64,
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let meta = TensorsMeta {
        format_version: FORMAT_VERSION,
        storage_dtype: dtype,
        tensors: metas,
    };
    let metadata = serde_json::to_vec(&meta).expect("tensor metadata serializes");
    write_container(path, MAGIC_WEIGHTS, &metadata, &payload)
}

/// Reads an "LXSW" tensor file back as (name, matrix) pairs in file order.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let raw = read_container(path, MAGIC_WEIGHTS)?;
    let meta: TensorsMeta = serde_json::from_slice(&raw.metadata).map_err(|e| Error::Format {
        reason: format!("metadata JSON: {e}"),
    })?;
    let mut out = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        let end = t.offset.checked_add(t.len).ok_or_else(|| Error::Format {
            reason: format!("tensor `{}` region overflows", t.name),
        })?;
        if end > raw.payload.len() as u64 {
            return Err(Error::Format {
                reason: format!("tensor `{}` extends past the payload", t.name),
            });
        }
        let m = decode_matrix(
            &raw.payload[t.offset as usize..end as usize],
            t.rows as usize,
            t.cols as usize,
            meta.storage_dtype,
        )?;
        out.push((t.name.clone(), m));
    }
    Ok(out)
}

/// Loads a single-matrix "LXSW" file (the plain weight-file form).
pub fn load_single_tensor(path: &Path) -> Result<Matrix> {
    let tensors = load_tensors(path)?;
    if tensors.len() != 1 {
        return Err(Error::Format {
            reason: format!("expected exactly one tensor, file holds {}", tensors.len()),
        });
    }
    Ok(tensors.into_iter().next().unwrap().1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng_matrix;
    use tempfile::TempDir;

    #[test]
    fn tensor_file_roundtrip_is_bitwise_at_f64() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("w.lxsw");
        let a = rng_matrix(5, 7, 1);
        let b = rng_matrix(2, 2, 2);
        save_tensors(&path, &[("a", &a), ("b", &b)], StorageDtype::F64).unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "a");
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);
    }

    #[test]
    fn payload_bit_flip_is_detected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("w.lxsw");
        let a = rng_matrix(4, 4, 3);
        save_tensors(&path, &[("w", &a)], StorageDtype::F64).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let payload_byte = bytes.len() - 33; // last payload byte
        bytes[payload_byte] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        match load_tensors(&path).unwrap_err() {
            Error::Integrity { offset, end } => assert!(offset < end),
            other => panic!("expected integrity error, got {other}"),
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("w.lxsw");
        let a = rng_matrix(4, 4, 4);
        save_tensors(&path, &[("w", &a)], StorageDtype::F64).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [0, 3, 15, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            match load_tensors(&path).unwrap_err() {
                Error::Format { .. } | Error::Integrity { .. } => {}
                other => panic!("cut at {cut}: unexpected error {other}"),
            }
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("w.bin");
        let a = rng_matrix(2, 2, 5);
        save_tensors(&path, &[("w", &a)], StorageDtype::F64).unwrap();
        assert!(read_container(&path, MAGIC_CHECKPOINT).is_err());
    }

    #[test]
    fn f32_overflow_is_reported() {
        let mut payload = Vec::new();
        let m = Matrix::new(1, 1, vec![1e300]).unwrap();
        match encode_matrix(&mut payload, &m, StorageDtype::F32) {
            Err(Error::DtypeOverflow { value }) => assert_eq!(value, 1e300),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn f32_roundtrip_rounds_but_stays_close() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("w.lxsw");
        let a = rng_matrix(6, 6, 6);
        save_tensors(&path, &[("w", &a)], StorageDtype::F32).unwrap();
        let b = load_single_tensor(&path).unwrap();
        let rel = a.sub(&b).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(rel > 0.0 && rel < 1e-6);
    }
}
