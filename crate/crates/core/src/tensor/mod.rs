//! Dense row-major float64 tensors with explicit backward passes.
//!
//! Only the operations the trainable path needs are provided. Every op has a
//! matching `*_backward` function; there is no autodiff graph.

mod gradcheck;
pub mod ops;
pub mod vtns;

use sha2::{Digest, Sha256};

use crate::error::{Result, VillmError};

pub use gradcheck::{grad_check, FnObjective, GradCheckReport, Objective};

#[derive(Clone, Debug)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl PartialEq for Tensor {
    /// Value equality: dims and data. Gradient state is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

impl Tensor {
    /// Builds a tensor, rejecting empty dims entries, length mismatches and
    /// non-finite values.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VillmError::Config(format!(
                "tensor dims must be positive, got {dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(VillmError::Shape {
                op: "Tensor::new",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        ensure_finite("Tensor::new", &data)?;
        Ok(Self::from_parts(dims, data))
    }

    /// Internal constructor for op outputs whose shape is correct by
    /// construction. Finiteness is checked by the op itself.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![0.0; n])
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(VillmError::Config("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers are responsible for keeping
    /// them finite; [`Tensor::check_finite`] re-validates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        ensure_finite(what, &self.data)
    }

    /// Row count and column count of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(VillmError::Shape {
                op: "shape2",
                lhs: self.dims.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.dims.last().expect("rank >= 1");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() || dims.contains(&0) {
            return Err(VillmError::Shape {
                op: "reshape",
                lhs: self.dims,
                rhs: dims,
            });
        }
        self.dims = dims;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Enables or disables gradient tracking. Enabling allocates a zeroed
    /// accumulator; disabling drops it.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![0.0; self.data.len()]);
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator. A no-op for tensors that
    /// do not require grad.
    pub fn accumulate_grad(&mut self, delta: &Tensor) -> Result<()> {
        if delta.dims != self.dims {
            return Err(VillmError::Shape {
                op: "accumulate_grad",
                lhs: self.dims.clone(),
                rhs: delta.dims.clone(),
            });
        }
        if let Some(g) = &mut self.grad {
            for (a, b) in g.iter_mut().zip(&delta.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Gradient as a tensor of the same shape (zeros when not tracked).
    pub fn grad_tensor(&self) -> Tensor {
        match &self.grad {
            Some(g) => Tensor::from_parts(self.dims.clone(), g.clone()),
            None => Tensor::zeros(&self.dims),
        }
    }

    /// Rounds every element to the nearest float32 value, keeping f64 storage.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = f64::from(*v as f32);
        }
    }

    /// SHA-256 over rank, dims and the little-endian f64 payload.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.feed_hash(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn feed_hash(&self, h: &mut Sha256) {
        h.update((self.dims.len() as u64).to_le_bytes());
        for &d in &self.dims {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &self.data {
            h.update(v.to_le_bytes());
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Hash of an ordered collection of tensors.
pub fn hash_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        t.feed_hash(&mut h);
    }
    hex::encode(h.finalize())
}

pub(crate) fn ensure_finite(what: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(VillmError::NonFinite(format!(
            "{what} (element {i} = {})",
            data[i]
        ))),
    }
}
