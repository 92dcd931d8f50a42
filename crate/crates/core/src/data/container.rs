//! TNSR: a minimal single-tensor binary container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "TNSR"
//! 4       1           version (1)
//! 5       1           dtype code (1 = float32)
//! 6       1           rank
//! 7       8 * rank    extents, u64 little-endian
//! ...     4 * numel   row-major f32 little-endian payload
//! ```
//!
//! No padding, no trailing bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Tensor};

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn encoded_len(t: &Tensor) -> usize {
    7 + 8 * t.rank() + 4 * t.numel()
}

/// Appends the TNSR record for `t` to `out`.
pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.dtype() != DType::F32 {
        return Err(Error::Unsupported {
            what: "tensor file dtype (only float32 is stored)",
            value: 2,
        });
    }
    if t.rank() > u8::MAX as usize {
        return Err(Error::Unsupported {
            what: "tensor rank",
            value: t.rank() as u64,
        });
    }
    out.reserve(encoded_len(t));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, t.rank() as u8]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_into(t, &mut out)?;
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt(format!("truncated tensor record at byte {}", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one record from the front of `bytes`; returns it with its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut pos = 0;
    let magic: [u8; 4] = take(bytes, &mut pos, 4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let head = take(bytes, &mut pos, 3)?;
    let (version, dtype, rank) = (head[0], head[1], head[2] as usize);
    if version != VERSION {
        return Err(Error::Unsupported {
            what: "tensor file version",
            value: version as u64,
        });
    }
    if dtype != DTYPE_F32 {
        return Err(Error::Unsupported {
            what: "tensor file dtype code",
            value: dtype as u64,
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().expect("8 bytes"));
        if d == 0 || d > (1 << 40) {
            return Err(Error::Corrupt(format!("implausible extent {d}")));
        }
        shape.push(d as usize);
    }
    let n = numel(&shape);
    let payload = take(bytes, &mut pos, n.checked_mul(4).ok_or_else(|| Error::Corrupt("extent overflow".into()))?)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((Tensor::new(shape, data, DType::F32)?, pos))
}

/// Decodes a buffer holding exactly one record.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after tensor record", bytes.len() - used)));
    }
    Ok(t)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    decode(&bytes)
}
