//! Real-valued tensors with reverse-mode gradient accumulation.
//!
//! Learnable tensors live in a [`ParamStore`]. A forward pass records
//! operations on a [`Tape`]; [`Tape::backward`] walks the tape in reverse
//! creation order (which is a valid topological order, since a node can only
//! reference earlier nodes) and [`Tape::accumulate`] adds the resulting
//! gradients into the store.
//!
//! Tape values are matrices: a parameter of shape `[.., C]` enters the tape
//! with its leading axes flattened into rows.

mod batchnorm;
mod gradcheck;
mod tape;

pub use batchnorm::{BatchNormState, BN_EPSILON, BN_MOMENTUM};
pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{AttentionSpec, Grads, Tape, Var};

use ndarray::{Array2, ArrayD, Ix2, IxDyn};

use crate::error::{dim_err, Result};

/// A tensor of rank at most 4 paired with a same-shape gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffTensor {
    pub values: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub requires_grad: bool,
}

impl DiffTensor {
    pub fn new(values: ArrayD<f64>, requires_grad: bool) -> Result<Self> {
        if values.ndim() > 4 {
            return Err(dim_err(format!("tensors have rank at most 4, got {}", values.ndim())));
        }
        let grad = ArrayD::zeros(values.raw_dim());
        Ok(Self { values, grad, requires_grad })
    }

    pub fn from_matrix(values: Array2<f64>, requires_grad: bool) -> Self {
        let values = values.into_dyn();
        let grad = ArrayD::zeros(values.raw_dim());
        Self { values, grad, requires_grad }
    }

    pub fn scalar(value: f64, requires_grad: bool) -> Self {
        let values = ArrayD::from_elem(IxDyn(&[]), value);
        let grad = ArrayD::zeros(IxDyn(&[]));
        Self { values, grad, requires_grad }
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Values with the leading axes flattened: `[.., C]` becomes `[rows, C]`.
    pub fn as_matrix(&self) -> Array2<f64> {
        let (rows, cols) = matrix_dims(self.values.shape());
        self.values
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("element count is preserved")
    }

    /// Gradient accumulator in the same matrix form as [`DiffTensor::as_matrix`].
    pub fn grad_matrix(&self) -> Array2<f64> {
        let (rows, cols) = matrix_dims(self.grad.shape());
        self.grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("element count is preserved")
    }

    /// Adds a gradient given in matrix form.
    pub fn accumulate(&mut self, grad: &Array2<f64>) -> Result<()> {
        if grad.len() != self.grad.len() {
            return Err(dim_err(format!(
                "gradient with {} elements for tensor of shape {:?}",
                grad.len(),
                self.shape()
            )));
        }
        for (g, &d) in self.grad.iter_mut().zip(grad.iter()) {
            *g += d;
        }
        Ok(())
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&cols, lead)) => (lead.iter().product(), cols),
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<DiffTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DiffTensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DiffTensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(DiffTensor::zero_grad);
    }

    /// Total number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad).map(DiffTensor::len).sum()
    }

    /// Returns the tensor as a 2-D matrix view if it already is one.
    pub fn matrix(&self, id: ParamId) -> Option<ndarray::ArrayView2<'_, f64>> {
        self.tensors[id.0].values.view().into_dimensionality::<Ix2>().ok()
    }
}
