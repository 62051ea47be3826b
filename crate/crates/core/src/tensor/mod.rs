//! Dense tensors and the reverse-mode tape that drives every network in the crate.
//!
//! Tensors are plain row-major buffers. Anything differentiable goes through a
//! [`Tape`], which records each forward op together with what its backward rule
//! needs and replays them in reverse on [`Tape::backward`].

mod conv;
mod gemm;
pub mod gradcheck;
mod tape;

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{dim_err, Error, Result};

pub use conv::{conv_out_side, conv_transpose_out_side};
pub use tape::{BnStats, Tape, Var};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    /// Tag written into serialized tensors: 0 = f32, 1 = f64.
    const DTYPE: u8;
    const BYTES: usize;

    /// `c = op(a) * op(b) + beta * c` on row-major contiguous matrices, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Real for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_trans: bool,
        b: &[f32],
        b_trans: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        gemm::gemm_f32(m, k, n, a, a_trans, b, b_trans, beta, c)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        gemm::gemm_f64(m, k, n, a, a_trans, b, b_trans, beta, c)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("zero extent in shape {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return dim_err(format!("shape {shape:?} needs {len} values, got {}", data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Little-endian: rank (u32), extents (u32 each), dtype tag (u8), raw values.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(T::DTYPE);
        for &v in &self.data {
            v.write_le(out);
        }
    }

    pub fn read_from(reader: &mut impl Read) -> Result<Self> {
        let rank = read_u32(reader)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("bad tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(reader)? as usize);
        }
        let mut tag = [0u8; 1];
        reader.read_exact(&mut tag)?;
        if tag[0] != T::DTYPE {
            return Err(Error::Format(format!("dtype tag {} does not match expected {}", tag[0], T::DTYPE)));
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * T::BYTES];
        reader.read_exact(&mut raw)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, writer: &mut impl Write) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf);
        writer.write_all(&buf)?;
        Ok(())
    }
}

pub(crate) fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    reader.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn serialized_layout() {
        let t = Tensor::<f32>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf);
        assert_eq!(&buf[..4], &1u32.to_le_bytes());
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(buf[8], 0);
        assert_eq!(&buf[9..13], &1.0f32.to_le_bytes());
        let back = Tensor::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(Tensor::<f64>::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let t = Tensor::<f64>::ones(&[3, 3]);
        let mut buf = Vec::new();
        t.write_to(&mut buf);
        buf.truncate(buf.len() - 3);
        assert!(Tensor::<f64>::read_from(&mut buf.as_slice()).is_err());
    }
}
