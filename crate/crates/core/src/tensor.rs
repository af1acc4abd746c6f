//! The `.ten` tensor file: a tiny self-describing little-endian container.
//!
//! Layout: magic `VSTN`, `u8` dtype (0 = f32, 1 = i32, 2 = u8), `u8` rank,
//! `rank` x `u32` dims, then the row-major payload.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VSTN";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I32 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I32),
            2 => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} need {expected} elements, payload has {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("rank {} too large", dims.len())));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f32_matrix(a: &Array2<f32>) -> Self {
        let (r, c) = a.dim();
        Tensor {
            dims: vec![r, c],
            data: TensorData::F32(a.iter().copied().collect()),
        }
    }

    pub fn from_f32_vector(a: &Array1<f32>) -> Self {
        Tensor {
            dims: vec![a.len()],
            data: TensorData::F32(a.to_vec()),
        }
    }

    pub fn from_u8_matrix(a: &Array2<u8>) -> Self {
        let (r, c) = a.dim();
        Tensor {
            dims: vec![r, c],
            data: TensorData::U8(a.iter().copied().collect()),
        }
    }

    pub fn from_i32(dims: Vec<usize>, values: Vec<i32>) -> Result<Self> {
        Tensor::new(dims, TensorData::I32(values))
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.write_u32::<LittleEndian>(d as u32).expect("vec write");
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.write_f32::<LittleEndian>(*x).expect("vec write")),
            TensorData::I32(v) => v
                .iter()
                .for_each(|x| out.write_i32::<LittleEndian>(*x).expect("vec write")),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated tensor header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let trunc = |_| Error::Format("truncated tensor header".to_string());
        let dtype = DType::from_code(cur.read_u8().map_err(trunc)?)?;
        let rank = cur.read_u8().map_err(trunc)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.read_u32::<LittleEndian>().map_err(trunc)? as usize);
        }
        let n: usize = dims.iter().product();
        let width = match dtype {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        };
        let remaining = bytes.len() - cur.position() as usize;
        if remaining != n * width {
            return Err(Error::Format(format!(
                "payload is {remaining} bytes, dims {dims:?} of {dtype:?} need {}",
                n * width
            )));
        }
        let payload = |_| Error::Format("truncated payload".to_string());
        let data = match dtype {
            DType::F32 => {
                let mut v = vec![0f32; n];
                cur.read_f32_into::<LittleEndian>(&mut v).map_err(payload)?;
                TensorData::F32(v)
            }
            DType::I32 => {
                let mut v = vec![0i32; n];
                cur.read_i32_into::<LittleEndian>(&mut v).map_err(payload)?;
                TensorData::I32(v)
            }
            DType::U8 => TensorData::U8(bytes[cur.position() as usize..].to_vec()),
        };
        Ok(Tensor { dims, data })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::decode(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Format(format!(
                "{what}: expected rank {rank}, found {}",
                self.rank()
            )));
        }
        Ok(())
    }

    pub fn into_f32_matrix(self, what: &str) -> Result<Array2<f32>> {
        self.expect_rank(2, what)?;
        match self.data {
            TensorData::F32(v) => Array2::from_shape_vec((self.dims[0], self.dims[1]), v)
                .map_err(|e| Error::Shape(e.to_string())),
            other => Err(Error::Format(format!(
                "{what}: expected f32, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_f32_vector(self, what: &str) -> Result<Array1<f32>> {
        self.expect_rank(1, what)?;
        match self.data {
            TensorData::F32(v) => Ok(Array1::from(v)),
            other => Err(Error::Format(format!(
                "{what}: expected f32, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_u8_matrix(self, what: &str) -> Result<Array2<u8>> {
        self.expect_rank(2, what)?;
        match self.data {
            TensorData::U8(v) => Array2::from_shape_vec((self.dims[0], self.dims[1]), v)
                .map_err(|e| Error::Shape(e.to_string())),
            other => Err(Error::Format(format!(
                "{what}: expected u8, found {:?}",
                other.dtype()
            ))),
        }
    }

    /// Returns `(dims, values)` of an i32 tensor.
    pub fn into_i32(self, what: &str) -> Result<(Vec<usize>, Vec<i32>)> {
        match self.data {
            TensorData::I32(v) => Ok((self.dims, v)),
            other => Err(Error::Format(format!(
                "{what}: expected i32, found {:?}",
                other.dtype()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::from_i32(vec![2], vec![1, -2]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"VSTN");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[1, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &[0xfe, 0xff, 0xff, 0xff]);
    }

    #[test]
    fn f32_payload_bytes() {
        let t = Tensor::new(vec![1, 1], TensorData::F32(vec![1.0])).unwrap();
        assert_eq!(&t.encode()[14..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn decode_rejects_bad_magic_and_truncation() {
        assert!(matches!(Tensor::decode(b"XXXX\0\0"), Err(Error::Format(_))));
        let mut bytes = Tensor::from_i32(vec![3], vec![1, 2, 3]).unwrap().encode();
        bytes.pop();
        assert!(matches!(Tensor::decode(&bytes), Err(Error::Format(_))));
        assert!(matches!(
            Tensor::decode(b"VSTN\x07\x00"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 2], TensorData::U8(vec![0; 3])).is_err());
    }

    #[test]
    fn scalar_rank_zero_round_trips() {
        let t = Tensor::new(vec![], TensorData::F32(vec![2.5])).unwrap();
        assert_eq!(Tensor::decode(&t.encode()).unwrap(), t);
    }
}
