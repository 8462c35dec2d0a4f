use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Array2<F>,
    /// Receives decoupled weight decay.
    pub decay: bool,
    pub trainable: bool,
}

/// Ordered collection of named 2-D tensors.
///
/// Gradients use the same type: [`ParamSet::zeros_like`] gives a buffer with
/// identical names and shapes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            decay,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        decay: bool,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let value = Array2::from_shape_simple_fn(shape, || F::of(normal.sample(rng)));
        self.add(name, value, decay)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: (usize, usize), v: f64) -> ParamId {
        self.add(name, Array2::from_elem(shape, F::of(v)), false)
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.entries[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: Array2::zeros(e.value.dim()),
                    decay: e.decay,
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for e in &mut self.entries {
            e.value.fill(F::zero());
        }
    }

    /// True when names and shapes line up entry by entry.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.dim() == b.value.dim())
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}
