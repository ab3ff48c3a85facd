//! Dense row-major tensors and the kernels every layer is built from.
//!
//! Video tensors use the axis order `(N, C, T, H, W)`; single images are the
//! degenerate `T = 1` case.

mod conv;
mod resize;
pub mod ustf;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use conv::{conv3d_backward, conv3d_forward, ConvGeometry, ConvGrads, Padding};
pub use resize::{trilinear_resize, trilinear_resize_backward};

/// Ordered list of extents, each at least 1.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "extent of axis {axis} is zero in {dims:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for axis in (0..self.0.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.0[axis + 1];
        }
        strides
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.0
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense N-dimensional array. Every stored value is finite.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

/// Right-hand side of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// `max(a, 0)`; the operand is ignored.
    Relu,
    /// Multiplication by a scalar operand.
    Scale,
}

pub(crate) fn ensure_finite<T: Scalar>(data: &[T], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, data)
    }

    pub fn from_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data })
    }

    /// Skips the finiteness scan; for kernels whose output is checked by the caller.
    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Self::from_shape(shape, vec![value; n])
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(&mut f).collect();
        Self::from_shape(shape, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-place parameter updates. Callers must keep
    /// every value finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.dims().to_vec(),
                right: shape.dims().to_vec(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn into_reshaped(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.dims().to_vec(),
                right: shape.dims().to_vec(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Converts precision, e.g. a 32-bit checkpoint into a 64-bit verification run.
    pub fn cast<U: Scalar>(&self) -> Result<Tensor<U>> {
        let data = self.data.iter().map(|&v| U::lit(v.to_f64_lossy())).collect();
        Tensor::from_shape(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(T) -> T, what: &str) -> Result<Self> {
        let data: Vec<T> = self.data.iter().map(|&v| f(v)).collect();
        ensure_finite(&data, what)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        let data: Vec<T> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        ensure_finite(&data, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        self.map(|v| v * factor, "scale")
    }

    pub fn relu(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Arithmetic mean over `axes`; reduced axes are removed from the shape.
    /// Repeated axes count once; an empty axis set returns the input.
    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        if !reduced.iter().any(|&r| r) {
            return Ok(self.clone());
        }
        let dims = self.dims();
        let out_dims: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| dims[a]).collect();
        let out_shape = Shape::new(out_dims)?;
        let out_strides = out_shape.strides();
        // stride in the output for each input axis (0 for reduced axes)
        let mut kept_stride = vec![0usize; rank];
        let mut k = 0;
        for axis in 0..rank {
            if !reduced[axis] {
                kept_stride[axis] = out_strides[k];
                k += 1;
            }
        }
        let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| dims[a]).product();
        let mut sums = vec![T::zero(); out_shape.numel()];
        let mut index = vec![0usize; rank];
        let mut out_pos = 0usize;
        for &value in &self.data {
            sums[out_pos] += value;
            // odometer increment
            for axis in (0..rank).rev() {
                index[axis] += 1;
                out_pos += kept_stride[axis];
                if index[axis] < dims[axis] {
                    break;
                }
                out_pos -= kept_stride[axis] * dims[axis];
                index[axis] = 0;
            }
        }
        let denom = T::lit(count as f64);
        let data: Vec<T> = sums.into_iter().map(|s| s / denom).collect();
        ensure_finite(&data, "reduce_mean")?;
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }
}

/// Applies `op` to `a` and `b` elementwise.
pub fn elementwise<T: Scalar>(op: ElementwiseOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    match (op, b) {
        (ElementwiseOp::Relu, _) => Ok(a.relu()),
        (ElementwiseOp::Add, Operand::Tensor(b)) => a.add(b),
        (ElementwiseOp::Sub, Operand::Tensor(b)) => a.sub(b),
        (ElementwiseOp::Mul, Operand::Tensor(b)) => a.mul(b),
        (ElementwiseOp::Add, Operand::Scalar(s)) => a.map(|v| v + s, "add"),
        (ElementwiseOp::Sub, Operand::Scalar(s)) => a.map(|v| v - s, "sub"),
        (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Scalar(s)) => a.scale(s),
        (ElementwiseOp::Scale, Operand::Tensor(b)) => Err(Error::ShapeMismatch {
            op: "scale",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(vec![2, 0, 3]).is_err());
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().numel(), 24);
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().strides(), vec![12, 4, 1]);
    }

    #[test]
    fn construction_rejects_nan_and_bad_length() {
        assert!(matches!(
            Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::<f64>::new(vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f64>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = elementwise(ElementwiseOp::Relu, &x, Operand::Scalar(0.0)).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = Tensor::<f64>::new(vec![2, 2], vec![1.5, -2.0, 3.25, 0.0]).unwrap();
        let z = Tensor::zeros(vec![2, 2]).unwrap();
        assert_eq!(elementwise(ElementwiseOp::Add, &x, Operand::Tensor(&z)).unwrap(), x);
    }

    #[test]
    fn mul_pairs() {
        let a = Tensor::<f64>::new(vec![2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2], vec![4.0, 5.0]).unwrap();
        let c = elementwise(ElementwiseOp::Mul, &a, Operand::Tensor(&b)).unwrap();
        assert_eq!(c.data(), &[8.0, 15.0]);
    }

    #[test]
    fn mismatch_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![3, 2]).unwrap();
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn overflowing_scale_is_an_error() {
        let a = Tensor::<f32>::full(vec![2], 3.0e38).unwrap();
        assert!(matches!(a.scale(10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reduce_mean_cases() {
        let ones = Tensor::<f64>::ones(vec![2, 3, 4]).unwrap();
        let m = ones.reduce_mean(&[0, 2]).unwrap();
        assert_eq!(m.dims(), &[3]);
        assert!(m.data().iter().all(|&v| v == 1.0));

        let x = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let all = x.reduce_mean(&[0, 1]).unwrap();
        assert_eq!(all.dims(), &[] as &[usize]);
        assert_eq!(all.data(), &[3.0]);

        assert_eq!(x.reduce_mean(&[]).unwrap(), x);
        let rows = x.reduce_mean(&[1]).unwrap();
        assert_eq!(rows.data(), &[1.5, 4.5]);
        let cols = x.reduce_mean(&[0]).unwrap();
        assert_eq!(cols.data(), &[2.0, 4.0]);
        assert!(matches!(x.reduce_mean(&[2]), Err(Error::InvalidAxis { axis: 2, rank: 2 })));
    }
}
