//! Little-endian tensor container.
//!
//! Layout: magic `DCTN`, version `u32`, rank `u32`, one `u64` per
//! dimension, then the elements as raw `f32`.

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DCTN";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 34)
        .ok_or_else(|| Error::Format(format!("implausible tensor shape {shape:?}")))?;
    let mut raw = vec![0u8; n * 4];
    read_exact(r, &mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
        .collect();
    Tensor::new(&shape, data)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut &bytes[..])
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated data".into()),
        _ => Error::Format(e.to_string()),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"DCTN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), -2.5);
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = encode_tensor(&Tensor::ones(&[3]));
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let t = crate::tensor::gradcheck::random_tensor(&shape, -10.0, 10.0, seed);
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            let stored: Vec<Real> = t.data().iter().map(|&v| v as f32 as Real).collect();
            prop_assert!(back.bit_eq(&Tensor::new(t.shape(), stored).unwrap()));
        }
    }
}
