use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type of a graph: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn to64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to64())).collect(),
        }
    }

    /// The five axes `(batch, channel, d, h, w)`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        dims5(&self.shape)
    }
}

pub(crate) fn dims5(shape: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape)
        .map_err(|_| Error::Shape(format!("expected (b, c, d, h, w), got {shape:?}")))
}
