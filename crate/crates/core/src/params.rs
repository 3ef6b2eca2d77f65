//! Named parameter storage shared by the model, the optimizer and the
//! checkpoint format.
//!
//! Parameters live outside the tape; each training step registers the
//! current values as leaves through a [`Forward`] context, runs the
//! graph, and reads gradients back per parameter. Registration order is
//! fixed at init, which keeps optimizer state, checkpoints and RNG
//! consumption deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{DenseArray, Gradients, NodeId, Tape};
use crate::scalar::{real, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: DenseArray<T>,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name \"{name}\""
        );
        self.entries.push(ParamEntry {
            name,
            value,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &DenseArray<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Mark every parameter whose name starts with `prefix`; returns the
    /// number of parameters affected.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// Overwrite one value; dims must match the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: DenseArray<T>) {
        assert_eq!(
            self.entries[id.0].value.dims(),
            value.dims(),
            "set_value dims for \"{}\"",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast::<U>(),
                    frozen: e.frozen,
                })
                .collect(),
        }
    }
}

/// Glorot-uniform initialization, sampled in f64 so every scalar type
/// sees the same values.
pub fn glorot<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseArray<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| real::<T>(rng.random_range(-a..a)))
        .collect();
    DenseArray::from_vec(&[rows, cols], data).unwrap()
}

pub fn identity_matrix<T: Real>(dim: usize) -> DenseArray<T> {
    let mut m = DenseArray::zeros(&[dim, dim]);
    for i in 0..dim {
        m.data_mut()[i * dim + i] = T::one();
    }
    m
}

/// One forward pass: a tape plus the parameter leaves registered on it.
pub struct Forward<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    nodes: Vec<Option<NodeId>>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Forward {
            tape: Tape::new(),
            nodes: vec![None; store.len()],
            store,
        }
    }

    /// Tape leaf for a parameter (registered once per pass).
    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let n = self.tape.leaf(self.store.get(id).clone());
        self.nodes[id.0] = Some(n);
        n
    }

    pub fn leaf(&mut self, value: DenseArray<T>) -> NodeId {
        self.tape.leaf(value)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Per-parameter gradients after a backward pass; `None` for
    /// parameters that never entered this graph.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<DenseArray<T>>> {
        self.nodes
            .iter()
            .map(|n| n.map(|id| grads.wrt(id)))
            .collect()
    }
}
