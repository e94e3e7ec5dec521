//! Dense row-major `f64` tensors and a dynamically built reverse-mode
//! differentiation graph.
//!
//! A [`Graph`] is created per forward pass. Values enter it as constants,
//! leaves, or bound [`Parameter`]s; every operation appends a node; and
//! [`Graph::backward`] accumulates adjoints into every node that requires a
//! gradient. Parameters read their gradients back out of the graph with
//! [`ParamStore::accumulate_grads`].

mod checkpoint;
mod graph;
mod param;
mod resample;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use resample::ResamplePlan;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(
            shape.iter().all(|&d| d > 0),
            "zero-sized dimension in {shape:?}"
        );
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor holding `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Tensor {
            shape: vec![n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index.iter().zip(shape).fold(0, |acc, (&i, &d)| {
        assert!(i < d, "index {index:?} out of bounds for {shape:?}");
        acc * d + i
    })
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
