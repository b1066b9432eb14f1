//! Dense row-major tensors, a real FFT along the last axis, and a small
//! define-by-run reverse-mode differentiation graph.
//!
//! Complex tensors store interleaved `(re, im)` pairs. Inside the graph they
//! are differentiated as real vectors of twice the length, so the gradient of
//! a complex node holds `(dL/d re, dL/d im)` pairs.

mod fft;
mod graph;

pub use fft::{irfft, rfft, spectrum_len};
pub use graph::{Activation, Gradients, Graph, Var};

use crate::error::{shape_err, Error, Result};
use rustfft::num_complex::Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    Real,
    Complex,
}

impl DType {
    /// Number of stored `f64` per logical element.
    pub fn width(self) -> usize {
        match self {
            DType::Real => 1,
            DType::Complex => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, DType::Real, data)
    }

    /// Complex tensor from interleaved `(re, im)` storage.
    pub fn complex(shape: &[usize], interleaved: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, DType::Complex, interleaved)
    }

    pub fn with_dtype(shape: &[usize], dtype: DType, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel * dtype.width() != data.len() {
            return Err(shape_err(
                "tensor",
                format!(
                    "shape {shape:?} ({dtype:?}) needs {} values, got {}",
                    numel * dtype.width(),
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            dtype,
            data,
        })
    }

    pub fn from_complex(shape: &[usize], values: &[Complex64]) -> Result<Self> {
        let data = values.iter().flat_map(|c| [c.re, c.im]).collect();
        Self::complex(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            dtype: DType::Real,
            data: vec![0.0; numel],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            dtype: other.dtype,
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            dtype: DType::Real,
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_complex(&self) -> bool {
        self.dtype == DType::Complex
    }

    /// Logical element count (a complex element counts once).
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_complex_vec(&self) -> Result<Vec<Complex64>> {
        if !self.is_complex() {
            return Err(Error::Contract("expected a complex tensor".into()));
        }
        Ok(self
            .data
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect())
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.dtype == DType::Real && self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all extents except the last.
    pub(crate) fn rows(&self) -> usize {
        match self.shape.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 1,
        }
    }
}
