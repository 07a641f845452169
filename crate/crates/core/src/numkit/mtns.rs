//! `MTNS` tensor blobs.
//!
//! Layout: magic `MTNS`, u16 version (1), u8 dtype (0 = f32, 1 = f64),
//! u8 ndim, ndim × u32 dims, then the row-major payload. All little-endian.

use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTNS";
pub const VERSION: u16 = 1;

/// A tensor of either on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn to<F: Real>(&self) -> Tensor<F> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => encode(t),
            AnyTensor::F64(t) => encode(t),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn encode<F: Real>(t: &Tensor<F>) -> Vec<u8> {
    let width = if F::DTYPE == 0 { 4 } else { 8 };
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + width * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(F::DTYPE);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        if F::DTYPE == 0 {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > buf.len() {
        return Err(Error::Format(format!("truncated MTNS blob at byte {}", *pos)));
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

/// Decode one blob from the front of `buf`; returns it and the bytes consumed.
pub fn decode(buf: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut pos = 0;
    if take(buf, &mut pos, 4)? != MAGIC {
        return Err(Error::Format("bad MTNS magic".into()));
    }
    let version = u16::from_le_bytes(take(buf, &mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MTNS version {version}")));
    }
    let dtype = take(buf, &mut pos, 1)?[0];
    let ndim = take(buf, &mut pos, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(take(buf, &mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let t = match dtype {
        0 => {
            let bytes = take(buf, &mut pos, 4 * n)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            AnyTensor::F32(Tensor::new(shape, data)?)
        }
        1 => {
            let bytes = take(buf, &mut pos, 8 * n)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            AnyTensor::F64(Tensor::new(shape, data)?)
        }
        d => return Err(Error::Format(format!("unknown MTNS dtype {d}"))),
    };
    Ok((t, pos))
}

pub fn write_file<F: Real>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (t, used) = decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes after tensor", path.display())));
    }
    Ok(t)
}

pub fn read_file<F: Real>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    Ok(read_any(path)?.to())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"MTNS");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 0);
        assert_eq!(b[7], 2);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn truncated_blob_rejected() {
        let b = encode(&Tensor::<f64>::zeros(&[3]));
        assert!(decode(&b[..b.len() - 1]).is_err());
        assert!(decode(b"MTNX").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(any::<f32>(), 0..40)) {
            let n = vals.len();
            let t = Tensor::new(vec![n], vals).unwrap();
            let (back, used) = decode(&encode(&t)).unwrap();
            prop_assert_eq!(used, 8 + 4 + 4 * n);
            match back {
                AnyTensor::F32(b) => {
                    let x: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                    let y: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(x, y);
                }
                _ => prop_assert!(false),
            }
        }
    }
}
