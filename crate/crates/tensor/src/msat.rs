//! MSAT binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `"MSAT"` |
//! | 4 | version `u32` = 1 |
//! | 1 | dtype `u8` (1 = f32, 2 = f64, 3 = u32) |
//! | 1 | rank `u8` |
//! | 2 | reserved `u16` = 0 |
//! | 8 × rank | extents `u64` |
//! | … | row-major payload |

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{AnyTensor, DType, Tensor};

pub const MAGIC: &[u8; 4] = b"MSAT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

pub fn encode(t: &AnyTensor) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * shape.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(u8::try_from(shape.len()).expect("rank fits in u8"));
    out.extend_from_slice(&0u16.to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match t {
        AnyTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        AnyTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        AnyTensor::U32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(TensorError::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < HEADER_LEN {
        return format_err(bytes.len(), "truncated header");
    }
    if &bytes[0..4] != MAGIC {
        return format_err(0, "bad magic");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return format_err(4, format!("unsupported version {version}"));
    }
    let Some(dtype) = DType::from_code(bytes[8]) else {
        return format_err(8, format!("unknown dtype code {}", bytes[8]));
    };
    let rank = bytes[9] as usize;
    if u16::from_le_bytes([bytes[10], bytes[11]]) != 0 {
        return format_err(10, "reserved field is not zero");
    }
    let mut shape = Vec::with_capacity(rank);
    let mut at = HEADER_LEN;
    for _ in 0..rank {
        let Some(raw) = bytes.get(at..at + 8) else {
            return format_err(bytes.len(), "truncated extents");
        };
        let e = u64::from_le_bytes(raw.try_into().unwrap());
        if e == 0 {
            return format_err(at, "zero extent");
        }
        let Ok(e) = usize::try_from(e) else {
            return format_err(at, "extent too large");
        };
        shape.push(e);
        at += 8;
    }
    let Some(count) = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)) else {
        return format_err(HEADER_LEN, "element count overflows");
    };
    let payload = &bytes[at..];
    let expected = count.checked_mul(dtype.size_of());
    if expected != Some(payload.len()) {
        return format_err(
            bytes.len(),
            format!(
                "payload has {} bytes, shape {shape:?} of {dtype:?} needs {}",
                payload.len(),
                count.saturating_mul(dtype.size_of())
            ),
        );
    }
    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(build(&shape, payload, f32::from_le_bytes)),
        DType::F64 => AnyTensor::F64(build(&shape, payload, f64::from_le_bytes)),
        DType::U32 => AnyTensor::U32(build(&shape, payload, u32::from_le_bytes)),
    };
    Ok(tensor)
}

fn build<T: crate::tensor::Element, const N: usize>(
    shape: &[usize],
    payload: &[u8],
    from: fn([u8; N]) -> T,
) -> Tensor<T> {
    let data = payload
        .chunks_exact(N)
        .map(|c| from(c.try_into().unwrap()))
        .collect();
    if shape.is_empty() {
        Tensor::scalar(Vec::<T>::from(data)[0])
    } else {
        Tensor::from_vec(shape, data).expect("validated shape")
    }
}

pub fn write(path: impl AsRef<Path>, t: &AnyTensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = AnyTensor::U32(Tensor::from_vec(&[2], vec![7, 9]).unwrap());
        let b = encode(&t);
        assert_eq!(&b[..4], b"MSAT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 3);
        assert_eq!(b[9], 1);
        assert_eq!(&b[10..12], &[0, 0]);
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[20..], &[7, 0, 0, 0, 9, 0, 0, 0]);
    }

    #[test]
    fn scalar_round_trips() {
        let t = AnyTensor::F64(Tensor::scalar(-2.5));
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.shape(), &[] as &[usize]);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let t = AnyTensor::F32(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = encode(&t);
        for cut in [0, 3, 11, 15, b.len() - 1] {
            assert!(matches!(decode(&b[..cut]), Err(TensorError::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn bad_header_fields_report_offsets() {
        let t = AnyTensor::F32(Tensor::scalar(1.0));
        let mut b = encode(&t);
        b[8] = 9;
        assert!(matches!(decode(&b), Err(TensorError::Format { offset: 8, .. })));
        let mut b = encode(&t);
        b[4] = 2;
        assert!(matches!(decode(&b), Err(TensorError::Format { offset: 4, .. })));
        let mut b = encode(&t);
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(TensorError::Format { offset: 0, .. })));
    }
}
