//! Minimal reverse-mode-differentiable numerical core.
//!
//! A [`Graph`] is an eagerly-evaluated tape: building an op computes its value
//! immediately and records enough to run exact reverse-mode differentiation
//! later. The op set is exactly what the encoder-decoder model needs (matmul,
//! LSTM gate arithmetic, strided same-padding convolution, embedding gather,
//! masked softmax, attention contractions, cross-entropy), plus an Adam
//! optimizer with decoupled L2 decay and a central-finite-difference gradient
//! checker used as the test oracle.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks instantiate the same code in `f64`.

mod check;
mod graph;
mod lstm;
mod optim;

pub use check::grad_check;
pub use graph::{
    affine, conv2d_relu, conv_out_len, dropout, dropout_mask, embedding_lookup, Gradients, Graph,
    NodeId,
};
pub use lstm::{
    lstm_sequence, lstm_step, uniform_tensor, Direction, LstmLayerNodes, LstmLayerParams,
};
pub use optim::{Adam, AdamConfig};

use std::collections::HashMap;
use std::fmt;

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("token id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("cross-entropy over an all-masked batch")]
    AllMasked,
    #[error("valid length {len} exceeds sequence length {t}")]
    LengthExceedsSequence { len: usize, t: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("backward called before any forward op was recorded")]
    EmptyGraph,
    #[error("parameter {0} has no gradient; run backward first")]
    MissingGrad(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("{0}")]
    InvalidArg(String),
}

/// Floating-point element type for tensors; implemented for `f32` and `f64`.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Reinterprets the tensor with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(self.data.len(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum over the last axis, returning the index of the first maximum
    /// per row (ties resolve to the lowest index).
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = *self.shape.last().expect("argmax on empty shape");
        self.data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f32()).collect()
    }

    pub fn from_f32_slice(shape: &[usize], data: &[f32]) -> Self {
        Tensor::from_vec(shape, data.iter().map(|&v| F::from_f32(v)).collect())
    }
}

/// Named trainable tensors with deterministic iteration order.
#[derive(Debug, Clone)]
pub struct ParameterSet<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<(), NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: None,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>, NnError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>, NnError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(NnError::UnknownParam(name.to_string())),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<F>> {
        self.entries.iter()
    }

    pub fn entry(&self, i: usize) -> &ParamEntry<F> {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry<F> {
        &mut self.entries[i]
    }

    /// Adds `g` into the gradient slot of parameter `i`, allocating it on first use.
    pub fn accumulate_grad(&mut self, i: usize, g: &Tensor<F>) {
        let entry = &mut self.entries[i];
        match &mut entry.grad {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                    *a = *a + *b;
                }
            }
            None => entry.grad = Some(g.clone()),
        }
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Converts every tensor element, preserving names and order.
    pub fn cast<G: Scalar>(&self) -> ParameterSet<G> {
        let mut out = ParameterSet::new();
        for e in &self.entries {
            let data = e.value.data().iter().map(|v| G::from_f64(v.as_f64())).collect();
            out.insert(&e.name, Tensor::from_vec(e.value.shape(), data))
                .expect("names already unique");
        }
        out
    }
}

impl<F: Scalar> Default for ParameterSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Train/eval switch for dropout and other stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
