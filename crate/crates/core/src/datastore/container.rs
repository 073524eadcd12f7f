//! Single-tensor binary container.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "NALN"
//! 4       4         format version (u32 LE)
//! 8       4         dtype tag (u32 LE): 0 = f32, 1 = f64
//! 12      4         rank r (u32 LE)
//! 16      8·r       dims (u64 LE each)
//! 16+8r   n·size    payload, row-major, little-endian
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"NALN";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;

fn dtype_tag(dtype: DType) -> u32 {
    match dtype {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn dtype_from_tag(tag: u32) -> Result<DType> {
    match tag {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        other => Err(Error::UnknownDType(other)),
    }
}

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let dtype = tensor.dtype();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * tensor.rank() + tensor.numel() * dtype.size_of());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype_tag(dtype).to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        // F32 tensors only hold f32-representable values, so the cast is exact.
        DType::F32 => tensor
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        DType::F64 => tensor
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn take(bytes: &[u8], at: usize, len: usize) -> Result<&[u8]> {
    bytes.get(at..at + len).ok_or(Error::Truncated {
        expected: at + len,
        actual: bytes.len(),
    })
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, at, 4)?.try_into().unwrap()))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let magic: [u8; 4] = take(bytes, 0, 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32_at(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let dtype = dtype_from_tag(u32_at(bytes, 8)?)?;
    let rank = u32_at(bytes, 12)? as usize;

    let mut shape = Vec::with_capacity(rank.min(64));
    let mut numel: usize = 1;
    for i in 0..rank {
        let raw = u64::from_le_bytes(take(bytes, HEADER_LEN + 8 * i, 8)?.try_into().unwrap());
        let d = usize::try_from(raw).map_err(|_| Error::shape(format!("dimension {raw} does not fit in memory")))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::shape("element count overflows"))?;
        shape.push(d);
    }
    let start = HEADER_LEN + 8 * rank;
    let payload_len = numel
        .checked_mul(dtype.size_of())
        .ok_or_else(|| Error::shape("payload size overflows"))?;
    let available = bytes.len().saturating_sub(start);
    if available < payload_len {
        return Err(Error::Truncated {
            expected: payload_len,
            actual: available,
        });
    }
    if available > payload_len {
        return Err(Error::TrailingBytes(available - payload_len));
    }
    let payload = &bytes[start..];
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::with_dtype(shape, data, dtype)
}

/// Writes one tensor atomically.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    super::write_atomic(path.as_ref(), &encode_tensor(tensor))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&super::read_file(path.as_ref())?)
}
