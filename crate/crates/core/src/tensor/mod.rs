//! Dense row-major `f64` tensors, the layer kernels the detector needs and a
//! small sequential network with retained activations for backprop.

pub mod checkpoint;
pub mod network;
pub mod ops;

use rand::Rng;

use crate::error::{Error, Result};

pub use network::{sgd_update, Layer, LayerSpec, Sequential};

/// Dense n-dimensional array of `f64` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "dimensions must be positive"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Uniform samples in `[-scale, scale]`.
    pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(-scale..=scale))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected [C,H,W], got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element `(c, y, x)` of a `[C, H, W]` tensor.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    /// Glorot-uniform initialisation, `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::new(name, Tensor::uniform(shape, s, rng))
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    /// Adds `g` into the gradient unless the parameter is frozen.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}
