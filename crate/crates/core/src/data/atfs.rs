//! ATFS feature files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `ATFS`                   |
//! | 4      | 4    | version (u32, = 1)             |
//! | 8      | 4    | rows (u32)                     |
//! | 12     | 4    | cols (u32)                     |
//! | 16     | 4·rows·cols | IEEE-754 f32, row-major |

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATFS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_atfs(matrix: &Tensor<f32>) -> Result<Vec<u8>> {
    if !matrix.is_finite() {
        return Err(Error::NonFinite { op: "write_atfs" });
    }
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Shape(format!("extent {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim(rows)?.to_le_bytes());
    out.extend_from_slice(&dim(cols)?.to_le_bytes());
    for v in matrix.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_atfs(bytes: &[u8]) -> Result<Tensor<f32>> {
    let fmt = |offset: usize, message: String| Error::Format { offset, message };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), format!("file of {} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if rows == 0 || cols == 0 {
        return Err(fmt(8, format!("empty matrix {rows}x{cols}")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt(8, "size overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(fmt(
            HEADER_LEN + body.len().min(expected),
            format!("body has {} bytes, header says {rows}x{cols} ({expected} bytes)", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub fn write_atfs(matrix: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_atfs(matrix)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn read_atfs(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_atfs(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_encodes_to_known_bytes() {
        let bytes = encode_atfs(&Tensor::scalar(0.5)).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[16..], &[0x00, 0x00, 0x00, 0x3F]);
        assert_eq!(&bytes[..4], b"ATFS");
    }

    #[test]
    fn rejects_bad_magic_with_offset() {
        let mut bytes = encode_atfs(&Tensor::scalar(1.0)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_atfs(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        assert!(err.to_string().contains("offset 0"));
    }

    #[test]
    fn rejects_version_and_truncation() {
        let good = encode_atfs(&Tensor::filled(2, 3, 1.5)).unwrap();
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_atfs(&v2), Err(Error::Format { offset: 4, .. })));
        let short = &good[..good.len() - 4];
        assert!(matches!(decode_atfs(short), Err(Error::Format { .. })));
        assert!(matches!(decode_atfs(&good[..10]), Err(Error::Format { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(decode_atfs(&long).is_err());
    }

    #[test]
    fn refuses_non_finite_on_write() {
        let t = Tensor::row(vec![1.0, f32::NAN]);
        assert!(matches!(encode_atfs(&t), Err(Error::NonFinite { .. })));
    }
}
