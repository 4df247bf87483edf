//! Binary feature files.
//!
//! Layout, all little-endian: `"NRTF"`, `u32` version (1), `u32` frame
//! count, `u32` frame width, then `frames × width` `f32` values row-major.

use std::path::Path;

use nartts_core::frames::AcousticFrames;
use nartts_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NRTF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

const WHAT: &str = "feature file";

pub fn encode(frames: &AcousticFrames) -> Vec<u8> {
    let t = frames.tensor();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(WHAT, bytes.len() as u64, "truncated header"))
}

pub fn decode(bytes: &[u8]) -> Result<AcousticFrames> {
    if bytes.len() < 4 {
        return Err(Error::format(WHAT, bytes.len() as u64, "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(WHAT, 0, "bad magic"));
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(Error::format(WHAT, 4, format!("unsupported version {version}")));
    }
    let rows = u32_at(bytes, 8)? as usize;
    let cols = u32_at(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(WHAT, 8, format!("empty shape {rows}x{cols}")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(WHAT, 8, "shape overflows"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            WHAT,
            bytes.len() as u64,
            format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(WHAT, expected as u64, "trailing bytes"));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let t = Tensor::new(&[rows, cols], data)?;
    AcousticFrames::new(t).map_err(|_| Error::format(WHAT, HEADER_LEN as u64, "non-finite value"))
}

pub fn write_features(path: &Path, frames: &AcousticFrames) -> Result<()> {
    std::fs::write(path, encode(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<AcousticFrames> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
