//! SVOL: a minimal volume container.
//!
//! Layout, all little-endian: magic `SVOL`, `u32` version, three `u32`
//! dimensions (x, y, z; images use z = 1), `f32` samples with x fastest,
//! then a `u32` CRC-32 of every preceding byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

pub const MAGIC: &[u8; 4] = b"SVOL";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 12;

pub fn encode(field: &Field) -> Vec<u8> {
    let n = field.grid.n as u32;
    let dims = if field.grid.dim == 2 {
        [n, n, 1]
    } else {
        [n, n, n]
    };
    let mut out = Vec::with_capacity(HEADER + 4 * field.data.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in &field.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses an SVOL image; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Field> {
    if bytes.len() < HEADER + 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not an SVOL file"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::FormatVersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let dims = [u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16)].map(|d| d as usize);
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected_len = count
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER + 4));
    if expected_len != Some(bytes.len()) {
        return Err(Error::ChecksumMismatch(path.to_path_buf()));
    }
    let body = bytes.len() - 4;
    if crc32fast::hash(&bytes[..body]) != u32_at(bytes, body) {
        return Err(Error::ChecksumMismatch(path.to_path_buf()));
    }
    let grid = match dims {
        [x, y, 1] if x == y && x > 1 => Grid::image(x),
        [x, y, z] if x == y && y == z && x > 0 => Grid::volume(x),
        _ => {
            return Err(Error::format(
                path,
                format!("unsupported dimensions {dims:?}"),
            ))
        }
    };
    let data = bytes[HEADER..body]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
        .collect();
    Field::from_vec(grid, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write(path: &Path, field: &Field) -> Result<()> {
    std::fs::write(path, encode(field)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Field> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
