//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MACC"              4 bytes
//! version             u32 (currently 1)
//! tensor count        u32
//! per tensor:
//!   name length       u32, then that many UTF-8 bytes
//!   rank              u32
//!   dims              rank × u64
//!   values            numel × f64
//! ```

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MACC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

pub fn write_tensors<W: Write>(mut out: W, tensors: &[NamedTensor]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for entry in tensors {
        let name = entry.name.as_bytes();
        let len = u32::try_from(name.len()).map_err(|_| Error::Format("tensor name too long".into()))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name)?;
        let shape = entry.tensor.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(entry.tensor.numel() * 8);
        for v in entry.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"MACC\"")));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            input.read_exact(&mut b).map_err(truncated)?;
            let d = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::Format(format!("dimension of '{name}' overflows")))?;
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape of '{name}' overflows")))?;
        let mut bytes = vec![0u8; numel * 8];
        input.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
        tensors.push(NamedTensor { name, tensor });
    }
    Ok(tensors)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated tensor container".into())
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[NamedTensor::new("w", t)]).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"MACC");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensors(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[NamedTensor::new("x", Tensor::ones(&[3]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensors(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 0..4),
            seed in any::<u64>(),
        ) {
            let mut bits = seed;
            let tensors: Vec<NamedTensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, shape)| {
                    let numel: usize = shape.iter().product();
                    let data = (0..numel)
                        .map(|_| {
                            bits = bits.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                            f64::from_bits(bits >> 2)
                        })
                        .collect();
                    NamedTensor::new(format!("t{i}/ü"), Tensor::new(shape, data).unwrap())
                })
                .collect();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &tensors).unwrap();
            let back = read_tensors(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for (a, b) in back.iter().zip(&tensors) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
                let abits: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }
    }
}
