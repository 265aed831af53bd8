//! Dense row-major f64 tensors.
//!
//! 64-bit precision throughout: the verification suite checks inequality
//! chains with slack tolerances near machine epsilon, which f32 cannot hold.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense tensor with a row-major value buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} implies {} values, got {}", shape, n, values.len()),
            ));
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![1.0; n] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    /// n×m matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::NonScalarOutput { len: self.values.len() });
        }
        Ok(self.values[0])
    }

    /// Interpret as a matrix, returning (rows, cols). 1-D tensors are rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!("cannot view {} values as {:?}", self.values.len(), shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of the matrix view.
    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.values[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }
}

/// Plain matrix-matrix product on value buffers: (n×k)·(k×m) → n×m.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k1) = a.dims2();
    let (k2, m) = b.dims2();
    if k1 != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for k in 0..k1 {
            let aik = av[i * k1 + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &bv[k * m..(k + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![n, m], out)
}
