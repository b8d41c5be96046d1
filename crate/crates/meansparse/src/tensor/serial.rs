//! Checkpoint tensor format: little-endian binary with magic `MSTN`, a dtype
//! code (0 = f64, 1 = f32), a rank byte, u64 extents, then raw values.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::Tensor;

const MAGIC: &[u8; 4] = b"MSTN";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_code(c: u8) -> Result<DType> {
        match c {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

pub fn write_mstn<W: Write>(w: &mut W, data: &[f64], shape: &[usize], dtype: DType) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Format("shape/data length mismatch".into()));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format("rank too large".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.code(), shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    match dtype {
        DType::F64 => {
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for &v in data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_mstn<R: Read>(r: &mut R) -> Result<(Vec<f64>, Vec<usize>, DType)> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let dtype = DType::from_code(head[4])?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut buf8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf8)?;
        shape.push(u64::from_le_bytes(buf8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        DType::F64 => {
            for _ in 0..n {
                r.read_exact(&mut buf8)?;
                data.push(f64::from_le_bytes(buf8));
            }
        }
        DType::F32 => {
            let mut buf4 = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf4)?;
                data.push(f32::from_le_bytes(buf4) as f64);
            }
        }
    }
    Ok((data, shape, dtype))
}

impl Tensor {
    pub fn write_to<W: Write>(&self, w: &mut W, dtype: DType) -> Result<()> {
        write_mstn(w, self.data(), self.shape(), dtype)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let (data, shape, _) = read_mstn(r)?;
        Tensor::new(data, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f64() {
        let t = Tensor::new(vec![1.5, -2.25, 3.0, 0.0, 7.125, -0.5], &[2, 3]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf, DType::F64).unwrap();
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn f32_narrows() {
        let t = Tensor::new(vec![0.1], &[1]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf, DType::F32).unwrap();
        let (data, shape, dtype) = read_mstn(&mut buf.as_slice()).unwrap();
        assert_eq!(dtype, DType::F32);
        assert_eq!(shape, vec![1]);
        assert_eq!(data[0], 0.1f32 as f64);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x00\x01".to_vec();
        assert!(read_mstn(&mut buf.as_slice()).is_err());
    }
}
