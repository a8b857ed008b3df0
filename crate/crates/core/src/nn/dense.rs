use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{shape, Result};

/// Weights (`out × in`) and bias (`out`) of an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients of a dense layer's loss with respect to its parameters and input.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array2<f64>,
}

impl DenseParams {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(shape(format!(
                "weight has {} rows, bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Uniform in ±1/√in for both weight and bias.
    pub fn init_uniform<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(out_dim, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    /// `x · Wᵀ + b` for a `B × in` batch.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(shape(format!(
                "layer expects {} inputs, batch has {} columns",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    pub fn backward(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> DenseGrads {
        DenseGrads {
            weight: grad_out.t().dot(&x),
            bias: grad_out.sum_axis(Axis(0)),
            input: grad_out.dot(&self.weight),
        }
    }
}

pub fn dense_forward(params: &DenseParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.forward(x)
}

pub fn relu(x: ArrayView2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Passes `grad` through where the pre-activation was positive.
pub fn relu_backward(pre: ArrayView2<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
    let mut out = grad.to_owned();
    out.zip_mut_with(&pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}
