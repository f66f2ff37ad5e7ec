//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable value: every operation returns a fresh
//! tensor and never touches its inputs. Construction rejects NaN and
//! infinities, so a tensor that exists is always finite.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` matches `data.len()` and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {i} of tensor {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The value of a scalar (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    /// `(rows, cols)` of a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> Result<&[f64]> {
        let (r, c) = self.dims2()?;
        if i >= r {
            return Err(Error::contract(format!("row {i} out of bounds for {r} rows")));
        }
        Ok(&self.data[i * c..(i + 1) * c])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub(crate) fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape, other.shape)))
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// `c * self`.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| c * v).collect())
    }

    /// Matrix product of `[n×k]` and `[k×m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2()?;
        let (k2, m) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {:?} x {:?}", self.shape, other.shape)));
        }
        let out = matmul_raw(&self.data, &other.data, n, k, m);
        Tensor::new(vec![n, m], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor::from_parts_unchecked(vec![c, r], transpose_raw(&self.data, r, c)))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
