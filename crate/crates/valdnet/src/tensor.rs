//! Dense n-dimensional tensor of 64-bit floats, row-major.
//!
//! `Tensor` is the universal value type of the crate: images, feature maps,
//! weight matrices, hidden states and losses are all tensors. Values are
//! immutable after creation except for the optional gradient buffer, which
//! the tape fills during the backward pass.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from raw row-major data. Rejects shape/data length
    /// mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// 1-D tensor from a slice.
    pub fn vector(data: &[f64]) -> Result<Self> {
        Tensor::new(vec![data.len()], data.to_vec())
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dim("ragged rows in matrix literal".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Gradient buffer, if the backward pass has produced one.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Overwrite one flat-index coordinate (used by the finite-difference
    /// gradient checker to perturb inputs in place).
    pub fn set(&mut self, index: usize, value: f64) {
        self.data[index] = value;
    }

    pub(crate) fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite value {} at index {pos} in {what}",
            data[pos]
        )));
    }
    Ok(())
}
