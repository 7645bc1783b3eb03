//! Dense 64-bit tensors, the real FFT, and a reverse-mode graph.

mod fft;
mod gradcheck;
mod graph;

pub use fft::{irfft, irfft_adjoint, rfft, rfft_adjoint, spectrum_filter_mul};
pub use gradcheck::{grad_check, grad_check_masked};
pub use graph::{Graph, GruWeights, TensorId};

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<f64>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dim(format!(
                "gradient length {} does not match tensor of {} elements",
                g.len(),
                self.data.len()
            )));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when viewed as a 2-d matrix (vectors count as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when viewed as a 2-d matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Half spectrum of a real signal: `bins = floor(n/2) + 1` frequency rows,
/// one column per hidden dimension, split into real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub bins: usize,
    pub dims: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn zeros(bins: usize, dims: usize) -> Self {
        ComplexSpectrum { bins, dims, re: vec![0.0; bins * dims], im: vec![0.0; bins * dims] }
    }

    pub fn new(bins: usize, dims: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != bins * dims || im.len() != bins * dims {
            return Err(Error::Dim(format!(
                "spectrum {}x{} wants {} entries per plane, got re={} im={}",
                bins,
                dims,
                bins * dims,
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexSpectrum { bins, dims, re, im })
    }

    /// Pack into a `[2, bins, dims]` tensor (real plane then imaginary plane).
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.re.len());
        data.extend_from_slice(&self.re);
        data.extend_from_slice(&self.im);
        Tensor { shape: vec![2, self.bins, self.dims], data, requires_grad: false, grad: None }
    }

    /// Inverse of [`ComplexSpectrum::to_tensor`].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[0] != 2 {
            return Err(Error::Dim(format!(
                "packed spectrum must have shape [2, bins, dims], got {:?}",
                t.shape()
            )));
        }
        let bins = t.shape()[1];
        let dims = t.shape()[2];
        let plane = bins * dims;
        Ok(ComplexSpectrum {
            bins,
            dims,
            re: t.data()[..plane].to_vec(),
            im: t.data()[plane..].to_vec(),
        })
    }
}
