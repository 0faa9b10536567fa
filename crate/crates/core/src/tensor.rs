//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero-sized dimension in shape {shape:?}")));
        }
        if numel(&shape) != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    /// Panicking constructor for internal use where the shape is known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            shape,
            values,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_parts(vec![n], values)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> Self {
        let values = sample_normal(numel(shape), sigma, rng);
        Tensor::from_parts(shape.to_vec(), values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::invalid("gradient length differs from tensor length"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.values.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.values[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of size {d}");
            off = off * d + ix;
        }
        off
    }

    /// Keeps only the listed indices along `axis`, in order.
    pub fn select_axis(&self, axis: usize, keep: &[usize]) -> Tensor {
        let (outer, dim, inner) = axis_split(&self.shape, axis);
        let mut values = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            for &k in keep {
                assert!(k < dim);
                let base = (o * dim + k) * inner;
                values.extend_from_slice(&self.values[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Tensor::from_parts(shape, values)
    }

    /// Inserts `block` along `axis` before position `at`. All other axes must agree.
    pub fn insert_axis(&self, axis: usize, at: usize, block: &Tensor) -> Result<Tensor> {
        if block.ndim() != self.ndim() {
            return Err(Error::invalid("insert_axis: rank mismatch"));
        }
        for (i, (a, b)) in self.shape.iter().zip(block.shape()).enumerate() {
            if i != axis && a != b {
                return Err(Error::invalid(format!(
                    "insert_axis: shape {:?} incompatible with block {:?} on axis {axis}",
                    self.shape,
                    block.shape()
                )));
            }
        }
        let (outer, dim, inner) = axis_split(&self.shape, axis);
        if at > dim {
            return Err(Error::invalid("insert_axis: position out of range"));
        }
        let add = block.shape[axis];
        let mut values = Vec::with_capacity(self.len() + block.len());
        for o in 0..outer {
            let row = &self.values[o * dim * inner..(o + 1) * dim * inner];
            values.extend_from_slice(&row[..at * inner]);
            values.extend_from_slice(&block.values[o * add * inner..(o + 1) * add * inner]);
            values.extend_from_slice(&row[at * inner..]);
        }
        let mut shape = self.shape.clone();
        shape[axis] += add;
        Ok(Tensor::from_parts(shape, values))
    }

    /// Row-major transpose of a 2-D tensor.
    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }
}

/// Splits a shape around `axis` into (outer, dim, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sample_normal<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    (0..n).map(|_| normal.sample(rng)).collect()
}
