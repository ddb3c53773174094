//! Dense row-major tensors, elementwise math and 2D/3D convolution.

mod conv;
mod scalar;

pub use conv::{
    conv2d, conv2d_backward, conv2d_backward_with, conv2d_with, conv3d, conv3d_backward,
    conv3d_backward_with, conv3d_with, ConvGrads, ConvKernel, ConvSpec, Padding,
};
pub(crate) use conv::ConvPlan;
pub use scalar::{gemm, Scalar, Trans};

use crate::error::{Error, Result};

/// N-dimensional dense array, channels-first and row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("Tensor::from_vec", "shape", "positive extents", format!("{shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::from_vec", "data", expected, data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Tensor<S> {
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        let shape = if self.shape.len() > 1 { self.shape[1..].to_vec() } else { vec![1] };
        Tensor { shape, data }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for (i, p) in parts.iter().enumerate() {
            if p.shape != first.shape {
                return Err(Error::dim("Tensor::stack", format!("part {i}"), format!("{:?}", first.shape), format!("{:?}", p.shape)));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.same_shape(other, "Tensor::zip_map")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn same_shape(&self, other: &Tensor<S>, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            let axis = self
                .shape
                .iter()
                .zip(&other.shape)
                .position(|(a, b)| a != b)
                .map(|i| format!("axis {i}"))
                .unwrap_or_else(|| "rank".to_string());
            return Err(Error::dim(context, axis, format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        Ok(())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        self.same_shape(other, "Tensor::add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: S) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Result<S> {
        self.same_shape(other, "Tensor::max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, name: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { tensor: name.to_string() })
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// Pointwise operations available through [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Hadamard,
    Sigmoid,
    Tanh,
    Scale(f64),
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Applies `op` to `a` (and `b` for binary ops).
pub fn elementwise<S: Scalar>(op: ElementwiseOp, a: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let binary = |f: fn(S, S) -> S| -> Result<Tensor<S>> {
        let b = b.ok_or_else(|| Error::Usage(format!("{op:?} needs a second operand")))?;
        a.zip_map(b, f)
    };
    match op {
        ElementwiseOp::Add => binary(|x, y| x + y),
        ElementwiseOp::Sub => binary(|x, y| x - y),
        ElementwiseOp::Hadamard => binary(|x, y| x * y),
        ElementwiseOp::Sigmoid => Ok(a.map(sigmoid)),
        ElementwiseOp::Tanh => Ok(a.map(S::tanh)),
        ElementwiseOp::Scale(s) => {
            let s = S::lit(s);
            Ok(a.map(|x| x * s))
        }
    }
}

/// [`elementwise`] that rejects non-finite operands and results.
pub fn elementwise_checked<S: Scalar>(op: ElementwiseOp, a: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    a.ensure_finite("lhs")?;
    if let Some(b) = b {
        b.ensure_finite("rhs")?;
    }
    let out = elementwise(op, a, b)?;
    out.ensure_finite("result")?;
    Ok(out)
}
