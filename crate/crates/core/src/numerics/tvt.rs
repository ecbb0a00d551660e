//! `TVT1` tensor files: magic, dtype code, rank, little-endian u64 extents,
//! then raw little-endian row-major values.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TVT1";

pub fn encode<T: Float>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    let ndim = u8::try_from(tensor.ndim())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", tensor.ndim())))?;
    let mut out = Vec::with_capacity(6 + 8 * tensor.ndim() + T::DTYPE.size() * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(ndim);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Header fields of a TVT blob.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TvtHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub header_len: usize,
}

pub fn read_header(bytes: &[u8]) -> Result<TvtHeader> {
    if bytes.len() < 6 {
        return Err(Error::Format("TVT blob shorter than its header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad TVT magic".into()));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::Format(format!("unknown TVT dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    let header_len = 6 + 8 * ndim;
    if bytes.len() < header_len {
        return Err(Error::Format("truncated TVT extents".into()));
    }
    let shape = (0..ndim)
        .map(|i| {
            let off = 6 + 8 * i;
            u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")) as usize
        })
        .collect();
    Ok(TvtHeader {
        dtype,
        shape,
        header_len,
    })
}

/// Decodes a blob, converting to `T` when the stored dtype differs.
pub fn decode<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    let header = read_header(bytes)?;
    let numel: usize = header.shape.iter().product();
    let width = header.dtype.size();
    let body = &bytes[header.header_len..];
    if body.len() != numel * width {
        return Err(Error::Format(format!(
            "TVT body holds {} bytes, shape {:?} needs {}",
            body.len(),
            header.shape,
            numel * width
        )));
    }
    let data: Vec<T> = match header.dtype {
        DType::F32 => body.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => body.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::new(header.shape, data)
}

pub fn write<T: Float>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(tensor)?)?;
    Ok(())
}

pub fn read<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t).unwrap();
        let mut expect = b"TVT1".to_vec();
        expect.extend_from_slice(&[0, 1]);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f64>::zeros(&[3, 2]);
        let mut bytes = encode(&t).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back: Tensor<f64> = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
