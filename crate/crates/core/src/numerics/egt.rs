//! `EGT1` binary tensor records.
//!
//! Layout, all little-endian:
//!
//! | bytes          | content                          |
//! |----------------|----------------------------------|
//! | 4              | magic `EGT1`                     |
//! | 8              | rank as `u64`                    |
//! | 8 × rank       | extents as `u64`                 |
//! | 4 × Π extents  | values as IEEE-754 `f32`         |
//!
//! Values are narrowed to `f32` on write.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EGT1";
const MAX_RANK: u64 = 8;

/// Size in bytes of the record produced by [`write_tensor`].
pub fn record_len(shape: &[usize]) -> usize {
    4 + 8 + 8 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(record_len(t.shape()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated record: {e}"));
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(fmt)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 8];
    input.read_exact(&mut word).map_err(fmt)?;
    let rank = u64::from_le_bytes(word);
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        input.read_exact(&mut word).map_err(fmt)?;
        let d = u64::from_le_bytes(word);
        if d == 0 || d > u32::MAX as u64 {
            return Err(Error::Format(format!("bad extent {d}")));
        }
        shape.push(d as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("extent overflow".into()))?;
    let mut raw = vec![0u8; n * 4];
    input.read_exact(&mut raw).map_err(fmt)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(record_len(t.shape()));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
