//! Named trainable parameters, their gradients, and the SGD update.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, name-addressable parameter storage.
///
/// Insertion order is the canonical order used by checkpoints and by
/// gradient accumulation, so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it as part of the L2 penalty.
    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// `sum(theta^2)` over decayed parameters.
    pub fn l2_penalty(&self) -> f64 {
        self.ids()
            .filter(|&id| self.decays(id))
            .map(|id| self.get(id).sum_squares())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Plain SGD: `theta -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) {
        for (i, value) in self.values.iter_mut().enumerate() {
            if let Some(g) = grads.grads.get(i).and_then(Option::as_ref) {
                for (w, d) in value.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; untouched parameters
/// have no buffer.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(store: &ParamStore) -> Self {
        ParamGrads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Buffer for `id`, zero-initialised with `shape` on first use.
    pub(crate) fn buffer(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Tensor {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.buffer(id, g.shape()).add_assign(g);
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Adds the gradient of `lambda * sum(theta^2)` over decayed parameters.
    pub fn add_l2(&mut self, store: &ParamStore, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for id in store.ids().filter(|&id| store.decays(id)) {
            let value = store.get(id);
            let buf = self.buffer(id, value.shape());
            for (g, w) in buf.data_mut().iter_mut().zip(value.data()) {
                *g += 2.0 * lambda * w;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    /// True when no parameter received a gradient or all received zero.
    pub fn is_zero(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.data().iter().all(|&x| x == 0.0))
    }
}

/// Normal(0, std) initialised tensor.
pub fn normal_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Glorot-scaled normal init for a `fan_in x fan_out` weight.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_tensor(fan_in, fan_out, std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(1, 2), true);
        let mut g = ParamGrads::new(&store);
        g.accumulate(a, &Tensor::row_vector(vec![3.0, 4.0]));
        assert_eq!(g.clip_global_norm(5.0), 5.0);
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        g.clip_global_norm(1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_only_counts_decayed_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(vec![1.0, 2.0]), true);
        store.add("emb", Tensor::row_vector(vec![10.0]), false);
        assert_eq!(store.l2_penalty(), 5.0);
        let mut g = ParamGrads::new(&store);
        g.add_l2(&store, 0.5);
        assert_eq!(g.get(store.id("w").unwrap()).unwrap().data(), &[1.0, 2.0]);
        assert!(g.get(store.id("emb").unwrap()).is_none());
    }
}
