//! Named parameter storage with gradient buffers and initializers.

use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Weight reference inside a graph op: either a trainable parameter in the
/// store driving the backward pass, or a frozen tensor treated as constant
/// (e.g. a pretrained feature extractor inside a loss).
#[derive(Debug, Clone)]
pub enum PSlot {
    Train(ParamId),
    Frozen(Rc<Tensor>),
}

impl PSlot {
    /// Resolves the slot to its current tensor value.
    pub fn get<'a>(&'a self, store: &'a ParamStore) -> &'a Tensor {
        match self {
            PSlot::Train(id) => store.value(*id),
            PSlot::Frozen(t) => t,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, PSlot::Train(_))
    }
}

#[derive(Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.params.push(value);
        self.names.push(name.into());
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Mutable value together with its (read-only) gradient, for optimizer
    /// updates that write parameters while reading gradients.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.params[id.0], &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Snapshots every parameter as a frozen slot list (index-aligned with
    /// ids), for use as constants inside someone else's training graph.
    pub fn freeze(&self) -> Vec<Rc<Tensor>> {
        self.params.iter().map(|p| Rc::new(p.clone())).collect()
    }
}

/// Kaiming-normal init for a conv/linear weight with the given fan-in.
pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}
