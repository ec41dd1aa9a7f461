//! Dense row-major tensors and the raw numerical kernels behind every layer.
//!
//! Image tensors use the (batch, channels, height, width) layout. Storage is
//! reference counted, so cloning a tensor is cheap and tensors can be handed
//! across threads once built. Mutation goes through [`Tensor::data_mut`],
//! which copies the buffer first if it is shared.

mod element;
pub mod kernels;
pub mod macs;

use std::fmt;
use std::sync::Arc;

pub use element::Element;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, checking that every dimension is positive and the
    /// buffer length matches the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![value; numel]) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new((0..numel).map(&mut f).collect()) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the buffer; copies it first if another tensor
    /// shares it.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The shape as `[n, c, h, w]`, or a dimension error naming `what`.
    pub fn dims4(&self, what: &str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(format!("{what} must be 4-D (N,C,H,W), got shape {:?}", self.shape))),
        }
    }

    pub fn dims2(&self, what: &str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::shape(format!("{what} must be 2-D, got shape {:?}", self.shape))),
        }
    }

    /// Same buffer viewed with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape,
                self.numel()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::cast(v.widen())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.widen()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum()
    }

    /// Largest elementwise absolute difference; infinite if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .fold(0.0, f64::max)
    }

    /// Adds `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("cannot add {:?} into {:?}", other.shape, self.shape)));
        }
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one dimension"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("tensor dimensions must be >= 1, got {shape:?}")));
    }
    Ok(())
}
