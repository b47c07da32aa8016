//! Dense row-major f64 tensor values.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, TensorError};

/// A dense n-dimensional array of 64-bit floats in row-major order.
///
/// Tensors are plain values: cloning copies the data, and they can move
/// between threads freely. Gradients are produced by a tape pass and can be
/// stashed back into the `grad` field, which when present always has the
/// same length as `data`. All stored values are finite; constructors reject
/// NaN and infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::EmptyShape { shape });
        }
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: data.len() });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { context: format!("tensor data (value {})", bad) });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. The caller keeps the finiteness
    /// invariant; the optimizer is the intended user.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeDataMismatch { shape: self.shape.clone(), len: grad.len() });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Value at a full multi-index. Intended for tests and small reads.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    /// Writes the tensor to a text file: first line is the space-separated
    /// shape, then one row-major value per line with 17 significant digits.
    pub fn dump_text(&self, path: &Path) -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let shape_line: Vec<String> = self.shape.iter().map(|e| e.to_string()).collect();
        writeln!(out, "{}", shape_line.join(" "))?;
        for v in &self.data {
            writeln!(out, "{:.16e}", v)?;
        }
        out.flush()
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
