use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorBuf<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TensorBuf<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::Config(format!(
                "tensor of shape {shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    /// Row `i` of the leading axis.
    pub fn row(&self, i: usize) -> &[T] {
        let stride = self.len() / self.shape[0].max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &TensorBuf<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// Element-wise cast to another precision.
    pub fn cast<U: Scalar>(&self) -> TensorBuf<U> {
        TensorBuf {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().expect("finite")).expect("castable"))
                .collect(),
        }
    }
}
