//! Binary tensor container.
//!
//! Layout: magic `SOKT`, version byte `0x01`, dtype byte (`0x00` f32 LE,
//! `0x01` u32 LE), rank byte, `rank` little-endian u32 dims, then the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SOKT";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;
pub const DTYPE_U32: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Container {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            dims: t.dims().to_vec(),
            payload: Payload::F32(t.data().to_vec()),
        }
    }

    pub fn from_u32(dims: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                dims,
                reason: format!("payload has {} elements", data.len()),
            });
        }
        Ok(Self {
            dims,
            payload: Payload::U32(data),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::InvalidShape {
                dims: self.dims.clone(),
                reason: "rank exceeds 255".into(),
            });
        }
        let (dtype, n) = match &self.payload {
            Payload::F32(v) => (DTYPE_F32, v.len()),
            Payload::U32(v) => (DTYPE_U32, v.len()),
        };
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + 4 * n);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(dtype);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::InvalidShape {
                dims: self.dims.clone(),
                reason: "dimension exceeds u32".into(),
            })?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(Error::Truncated {
                    expected: n,
                    found: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        need(7)?;
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let dtype = bytes[5];
        if dtype != DTYPE_F32 && dtype != DTYPE_U32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let rank = bytes[6] as usize;
        let header = 7 + 4 * rank;
        need(header)?;
        let dims: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("four bytes")) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape {
                dims: dims.clone(),
                reason: "element count overflows".into(),
            })?;
        let total = n
            .checked_mul(4)
            .and_then(|b| b.checked_add(header))
            .ok_or_else(|| Error::InvalidShape {
                dims: dims.clone(),
                reason: "payload size overflows".into(),
            })?;
        need(total)?;
        if bytes.len() > total {
            return Err(Error::TrailingBytes(bytes.len() - total));
        }
        let words = bytes[header..total].chunks_exact(4);
        let payload = if dtype == DTYPE_F32 {
            Payload::F32(words.map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
        } else {
            Payload::U32(words.map(|c| u32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
        };
        Ok(Self { dims, payload })
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self.payload {
            Payload::F32(v) => Tensor::new(self.dims, v),
            Payload::U32(_) => Err(Error::InvalidDataset("expected an f32 payload, found u32".into())),
        }
    }

    pub fn into_u32(self) -> Result<(Vec<usize>, Vec<u32>)> {
        match self.payload {
            Payload::U32(v) => Ok((self.dims, v)),
            Payload::F32(_) => Err(Error::InvalidDataset("expected a u32 payload, found f32".into())),
        }
    }
}

pub fn write_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, c.encode()?).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::decode(&bytes)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_container(path, &Container::from_tensor(t))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_container(path)?.into_tensor()
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let data = labels
        .iter()
        .map(|&l| u32::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds u32"))))
        .collect::<Result<Vec<u32>>>()?;
    write_container(path, &Container::from_u32(vec![labels.len()], data)?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let (dims, data) = read_container(path)?.into_u32()?;
    if dims.len() != 1 {
        return Err(Error::InvalidDataset(format!("labels must be a vector, got dims {dims:?}")));
    }
    Ok(data.into_iter().map(|v| v as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, proptest};

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, 3.25e-8, -7.0]).unwrap();
        let back = Container::decode(&Container::from_tensor(&t).encode().unwrap())
            .unwrap()
            .into_tensor()
            .unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(back.dims(), t.dims());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Container::from_tensor(&t).encode().unwrap();
        assert_eq!(&b[..7], &[b'S', b'O', b'K', b'T', 1, 0, 2]);
        assert_eq!(&b[7..15], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(b.len(), 15 + 8);
    }

    #[test]
    fn bad_magic() {
        let mut b = Container::from_tensor(&Tensor::scalar(1.0)).encode().unwrap();
        b[0] = b'X';
        assert!(matches!(Container::decode(&b), Err(Error::BadMagic(m)) if &m == b"XOKT"));
    }

    #[test]
    fn version_and_dtype_errors_are_distinct() {
        let mut b = Container::from_tensor(&Tensor::scalar(1.0)).encode().unwrap();
        b[4] = 2;
        assert!(matches!(Container::decode(&b), Err(Error::UnsupportedVersion(2))));
        b[4] = 1;
        b[5] = 7;
        assert!(matches!(Container::decode(&b), Err(Error::UnsupportedDtype(7))));
    }

    #[test]
    fn truncated_payload() {
        let t = Tensor::zeros(&[100]).unwrap();
        let b = Container::from_tensor(&t).encode().unwrap();
        let cut = &b[..11 + 50 * 4];
        assert!(matches!(
            Container::decode(cut),
            Err(Error::Truncated { expected: 411, found: 211 })
        ));
        assert!(matches!(Container::decode(&b[..2]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = Container::from_tensor(&Tensor::scalar(1.0)).encode().unwrap();
        b.push(0);
        assert!(matches!(Container::decode(&b), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn labels_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.sokt");
        save_labels(&p, &[3, 0, 9, 9]).unwrap();
        assert_eq!(load_labels(&p).unwrap(), vec![3, 0, 9, 9]);
        assert!(load_tensor(&p).is_err());
        assert!(matches!(load_tensor(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn any_tensor_round_trips(dims in prop::collection::vec(1usize..5, 1..4), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_mul(2_654_435_761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Container::decode(&Container::from_tensor(&t).encode().unwrap()).unwrap().into_tensor().unwrap();
            assert_eq!(back.dims(), t.dims());
            assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
