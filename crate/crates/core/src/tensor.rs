use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::linalg::Matrix;
use crate::Scalar;

/// A learnable buffer with its shape. Model parameter structs are built from
/// these so optimisers and the checkpoint container can treat them uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "tensor data does not match shape {shape:?}");
        Self { shape: shape.to_vec(), data }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn as_matrix(&self) -> Matrix<T> {
        assert_eq!(self.shape.len(), 2, "tensor of shape {:?} is not a matrix", self.shape);
        Matrix::from_vec(self.shape[0], self.shape[1], self.data.clone())
    }

    pub fn on_tape(&self, tape: &Tape<T>, trainable: bool) -> Var {
        if trainable {
            tape.param(self.data.clone(), &self.shape)
        } else {
            tape.constant(self.data.clone(), &self.shape)
        }
    }
}

impl<T: Scalar> From<Matrix<T>> for Tensor<T> {
    fn from(m: Matrix<T>) -> Self {
        let (r, c) = m.shape();
        Self { shape: vec![r, c], data: m.into_vec() }
    }
}

/// Uniform access to the named buffers of a parameter struct.
pub trait ParamSet<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data.len()).sum()
    }
}
