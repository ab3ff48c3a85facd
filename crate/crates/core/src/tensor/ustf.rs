//! USTF binary tensor files.
//!
//! Layout: magic `USTF`, version byte (1), dtype byte (1 = f32, 2 = f64),
//! rank byte, one zero padding byte, `rank` little-endian u64 extents, then
//! the row-major little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: [u8; 4] = *b"USTF";
pub const VERSION: u8 = 1;

/// A tensor of whichever precision the file declared.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to `T`, exact when the stored precision already is `T`.
    pub fn into_scalar<T: Scalar>(self) -> Result<Tensor<T>> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write<T: Scalar, W: Write>(tensor: &Tensor<T>, mut out: W) -> Result<()> {
    let rank = tensor.dims().len();
    let rank_byte = u8::try_from(rank).map_err(|_| Error::Format(format!("rank {rank} exceeds 255")))?;
    let mut buf = Vec::with_capacity(8 + rank * 8 + tensor.numel() * T::DTYPE.size());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&[VERSION, T::DTYPE.code(), rank_byte, 0]);
    for &d in tensor.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_header<R: Read>(input: &mut R) -> Result<(DType, Shape)> {
    let mut head = [0u8; 8];
    input
        .read_exact(&mut head)
        .map_err(|e| Error::Format(format!("truncated USTF header: {e}")))?;
    if head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported USTF version {}", head[4])));
    }
    let dtype = DType::from_code(head[5]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[5])))?;
    let rank = head[6] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut raw = [0u8; 8];
        input
            .read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated USTF extents: {e}")))?;
        let d = usize::try_from(u64::from_le_bytes(raw))
            .map_err(|_| Error::Format("extent does not fit in memory".into()))?;
        dims.push(d);
    }
    let shape = Shape::new(dims).map_err(|e| Error::Format(e.to_string()))?;
    Ok((dtype, shape))
}

fn read_payload<T: Scalar, R: Read>(input: &mut R, shape: Shape) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let mut raw = vec![0u8; shape.numel() * size];
    input
        .read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated USTF payload: {e}")))?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_shape(shape, data)
}

pub fn read_any<R: Read>(mut input: R) -> Result<AnyTensor> {
    let (dtype, shape) = read_header(&mut input)?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(read_payload(&mut input, shape)?),
        DType::F64 => AnyTensor::F64(read_payload(&mut input, shape)?),
    })
}

/// Reads a tensor whose stored dtype must be `T`.
pub fn read<T: Scalar, R: Read>(mut input: R) -> Result<Tensor<T>> {
    let (dtype, shape) = read_header(&mut input)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "expected {:?} payload, file holds {:?}",
            T::DTYPE,
            dtype
        )));
    }
    read_payload(&mut input, shape)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write(tensor, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read(BufReader::new(file))
}

/// Loads any precision and converts to `T`.
pub fn load_as<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_any(BufReader::new(file))?.into_scalar()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write(&t, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"USTF\x01\x01\x02\x00");
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..28], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 32);
    }

    #[test]
    fn dtype_mismatch_and_corruption() {
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write(&t, &mut buf).unwrap();
        assert!(read::<f32, _>(buf.as_slice()).is_err());
        assert_eq!(read::<f64, _>(buf.as_slice()).unwrap(), t);
        assert!(read::<f64, _>(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_any(bad.as_slice()).is_err());
        let mut zero_extent = buf.clone();
        zero_extent[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(read_any(zero_extent.as_slice()).is_err());
    }
}
