//! Content fingerprints for frozen components.
//!
//! A fingerprint hashes parameter names, shapes, and the f32 little-endian
//! bytes of the values — the same bytes the checkpoint format stores — so a
//! live component and its checkpoint record agree exactly.

use sha2::{Digest, Sha256};

use crate::tensor::Mat;

pub fn to_f32_le_bytes(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn mat_from_f32_le_bytes(bytes: &[u8], rows: usize, cols: usize) -> Option<Mat> {
    if bytes.len() != rows * cols * 4 {
        return None;
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Mat::from_shape_vec((rows, cols), vals).ok()
}

/// Digest over `(name, rows, cols, f32 bytes)` tuples in iteration order.
/// Callers must present entries in a canonical (sorted) order.
pub fn digest_named<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Mat)>) -> String {
    let mut h = Sha256::new();
    for (name, m) in entries {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        h.update(to_f32_le_bytes(m));
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_name_shape_and_bytes() {
        let a = Mat::from_elem((2, 3), 1.5);
        let b = Mat::from_elem((3, 2), 1.5);
        let d1 = digest_named([("w", &a)]);
        assert_eq!(d1, digest_named([("w", &a)]));
        assert_ne!(d1, digest_named([("v", &a)]));
        assert_ne!(d1, digest_named([("w", &b)]));
        let mut c = a.clone();
        c[[0, 0]] = 1.25;
        assert_ne!(d1, digest_named([("w", &c)]));
    }

    #[test]
    fn f32_bytes_round_trip() {
        let m = Mat::from_shape_vec((2, 2), vec![0.1f32 as f64, -3.5, 0.0, 7.25]).unwrap();
        let bytes = to_f32_le_bytes(&m);
        let back = mat_from_f32_le_bytes(&bytes, 2, 2).unwrap();
        assert_eq!(m, back);
    }
}
