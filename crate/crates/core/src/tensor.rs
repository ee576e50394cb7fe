//! Dense rank-4 arrays in NCHW order (W fastest).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type. Training runs in `f32`; gradient checks run in `f64`.
pub trait Real: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        if data.len() != numel(&shape) {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Contiguous H×W plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub(crate) fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(format!(
                "{what}: shape {:?} does not match {shape:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Selects a contiguous range of samples along the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!(
                "batch slice {start}..{} out of range for batch {n}",
                start + len
            )));
        }
        let per = c * h * w;
        Ok(Tensor {
            shape: [len, c, h, w],
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("stack_batch of zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::dim(format!(
                    "stack_batch: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }
}

/// Elementwise activations used across the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Relu,
}

#[inline]
pub fn sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, t: T) -> T {
        match self {
            Activation::Silu => t * sigmoid(t),
            Activation::Sigmoid => sigmoid(t),
            Activation::Relu => t.max(T::zero()),
        }
    }

    /// Derivative expressed through the input `t` and output `y`.
    #[inline]
    pub fn derivative<T: Real>(self, t: T, y: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(t);
                s * (T::one() + t * (T::one() - s))
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Relu => {
                if t > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|t| kind.apply(t))
}

/// Max-subtracted softmax of a vector.
pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Convolution description: kernel `(C_out, C_in/groups, k, k)`, optional bias, zero padding.
#[derive(Clone, Debug)]
pub struct ConvSpec<T> {
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups,
        }
    }

    /// Same-size 'k×k' convolution with one group.
    pub const fn same(k: usize) -> Self {
        Self::new(1, k / 2, 1)
    }

    pub fn output_shape(&self, x: Shape, kernel: Shape) -> Result<Shape> {
        let [n, c_in, h, w] = x;
        let [c_out, c_per_group, kh, kw] = kernel;
        let g = self.groups;
        if g == 0 || self.stride == 0 {
            return Err(Error::arg("conv groups and stride must be positive"));
        }
        if c_in % g != 0 || c_out % g != 0 {
            return Err(Error::dim(format!(
                "conv channels in={c_in} out={c_out} not divisible by groups={g}"
            )));
        }
        if c_per_group * g != c_in {
            return Err(Error::dim(format!(
                "conv input {x:?} incompatible with kernel {kernel:?} (groups={g})"
            )));
        }
        if kh != kw {
            return Err(Error::dim(format!("non-square kernel {kernel:?}")));
        }
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < kh || wp < kw {
            return Err(Error::dim(format!(
                "conv input {x:?} (padding {}) smaller than kernel {kernel:?}",
                self.padding
            )));
        }
        Ok([
            n,
            c_out,
            (hp - kh) / self.stride + 1,
            (wp - kw) / self.stride + 1,
        ])
    }
}

impl<T: Real> ConvSpec<T> {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding, self.groups)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = &self.bias {
            if b.len() != self.kernel.shape()[0] {
                return Err(Error::dim(format!(
                    "bias length {} does not match {} output channels",
                    b.len(),
                    self.kernel.shape()[0]
                )));
            }
        }
        Ok(())
    }
}

/// Forward cross-correlation without gradient tracking.
pub fn conv2d<T: Real>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    spec.validate()?;
    crate::conv::forward(x, &spec.kernel, spec.bias.as_deref(), spec.geometry())
}
