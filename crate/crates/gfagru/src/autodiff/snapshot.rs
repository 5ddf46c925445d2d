//! Flat binary parameter snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"GFPS"
//! u32    format version (1)
//! u32    tensor count
//! per tensor:
//!   u16      name length, then that many UTF-8 bytes
//!   u8       rank (1 or 2)
//!   u64 * r  extents
//!   f64 * n  row-major values, stored as raw IEEE-754 bits
//! ```
//!
//! Values round-trip bit-exactly because they are written as raw bits.

use std::fs;
use std::path::Path;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GFPS";
const VERSION: u32 = 1;

pub fn to_bytes(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let bad = |what: &str| Error::Format(format!("parameter snapshot: {what}"));
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(bad("truncated"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("name is not UTF-8"))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        if rank == 0 || rank > 2 {
            return Err(bad(&format!("bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_bits(u64::from_le_bytes(
                take(&mut pos, 8)?.try_into().unwrap(),
            )));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(entries)
}

pub fn write_snapshot(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, to_bytes(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
