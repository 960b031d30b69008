//! SHA-256 digests over canonical little-endian f64 tensor bytes.

use sha2::{Digest, Sha256};

use crate::linalg::Matrix;

/// Digest of a single matrix's entries (row-major, little-endian f64).
pub fn matrix_digest(m: &Matrix) -> [u8; 32] {
    let mut h = Sha256::new();
    update_with_matrix(&mut h, m);
    h.finalize().into()
}

/// Digest over a sequence of matrices, in iteration order.
pub fn digest_matrices<'a>(parts: impl IntoIterator<Item = &'a Matrix>) -> [u8; 32] {
    let mut h = Sha256::new();
    for m in parts {
        update_with_matrix(&mut h, m);
    }
    h.finalize().into()
}

pub(crate) fn update_with_matrix(h: &mut Sha256, m: &Matrix) {
    for &x in m.data() {
        h.update(x.to_le_bytes());
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn from_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}
