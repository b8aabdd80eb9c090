//! Named parameter storage, seeded initialization, and tape binding.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CmrError, Result};
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Frozen parameters are excluded from binding with gradients and from
    /// optimizer updates; they stay bitwise stable across training.
    pub frozen: bool,
}

impl Param {
    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.values.clone()).expect("param holds a consistent tensor")
    }
}

/// Parameters keyed by name. Iteration order is lexicographic, which fixes
/// the checkpoint layout and the optimizer update order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>, frozen: bool) {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>(), "{name}");
        debug_assert!(!self.params.contains_key(name), "duplicate parameter {name}");
        self.params.insert(name.to_string(), Param { shape, values, frozen });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| CmrError::InvalidInput {
            op: "param_store",
            reason: format!("unknown parameter '{name}'"),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.get_mut(name).ok_or_else(|| CmrError::InvalidInput {
            op: "param_store",
            reason: format!("unknown parameter '{name}'"),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter().filter(|(_, p)| !p.frozen)
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    /// Binds every parameter onto a tape: trainable parameters as gradient
    /// leaves, frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.params {
            let id = tape.leaf(&p.tensor(), !p.frozen);
            ids.insert(name.clone(), id);
        }
        Bound { ids }
    }

    /// Binds trainable parameters from externally supplied leaves (in
    /// lexicographic name order) and frozen parameters from the store. Used
    /// by the whole-model gradient check, which owns the trainable inputs.
    pub fn bind_with_trainable(&self, tape: &mut Tape, trainable: &[NodeId]) -> Result<Bound> {
        let mut ids = BTreeMap::new();
        let mut supplied = trainable.iter();
        for (name, p) in &self.params {
            let id = if p.frozen {
                tape.leaf(&p.tensor(), false)
            } else {
                *supplied.next().ok_or_else(|| CmrError::InvalidInput {
                    op: "bind",
                    reason: "fewer leaves than trainable parameters".into(),
                })?
            };
            ids.insert(name.clone(), id);
        }
        if supplied.next().is_some() {
            return Err(CmrError::InvalidInput {
                op: "bind",
                reason: "more leaves than trainable parameters".into(),
            });
        }
        Ok(Bound { ids })
    }

    /// Trainable parameter tensors in lexicographic name order, matching
    /// `bind_with_trainable`.
    pub fn trainable_tensors(&self) -> Vec<(String, Tensor)> {
        self.trainable().map(|(n, p)| (n.clone(), p.tensor())).collect()
    }

    /// Binds every parameter, taking leaves from `overrides` where given and
    /// from the store otherwise. Lets a probe vary a subset of parameters.
    pub fn bind_with(
        &self,
        tape: &mut Tape,
        overrides: &std::collections::BTreeMap<String, NodeId>,
    ) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.params {
            let id = overrides
                .get(name)
                .copied()
                .unwrap_or_else(|| tape.leaf(&p.tensor(), !p.frozen));
            ids.insert(name.clone(), id);
        }
        Bound { ids }
    }
}

/// Name-to-leaf mapping for one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| CmrError::InvalidInput {
            op: "bound_params",
            reason: format!("parameter '{name}' was not bound"),
        })
    }

    /// Gradients of every trainable parameter after a backward pass.
    /// Parameters the loss never touched report zeros.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, p) in store.trainable() {
            let id = self.ids[name];
            let g = tape
                .grad(id)
                .map_or_else(|| vec![0.0; p.values.len()], <[f64]>::to_vec);
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Seeded initializer. All draws go through one ChaCha stream so a model is
/// a pure function of its seed.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform Xavier-style draw scaled by fan-in and fan-out.
    pub fn xavier(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> (Vec<usize>, Vec<f64>) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        (shape, values)
    }

    pub fn normal(&mut self, shape: Vec<usize>, std: f64) -> (Vec<usize>, Vec<f64>) {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        (shape, values)
    }

    pub fn zeros(shape: Vec<usize>) -> (Vec<usize>, Vec<f64>) {
        let n: usize = shape.iter().product();
        (shape, vec![0.0; n])
    }

    pub fn ones(shape: Vec<usize>) -> (Vec<usize>, Vec<f64>) {
        let n: usize = shape.iter().product();
        (shape, vec![1.0; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_draws() {
        let mut a = Init::new(42);
        let mut b = Init::new(42);
        assert_eq!(a.xavier(vec![3, 4], 4, 3).1, b.xavier(vec![3, 4], 4, 3).1);
        assert_eq!(a.normal(vec![5], 0.3).1, b.normal(vec![5], 0.3).1);
    }

    #[test]
    fn binding_respects_frozen_flags() {
        let mut store = ParamStore::new();
        store.insert("a", vec![2], vec![1.0, 2.0], false);
        store.insert("frozen.b", vec![2], vec![3.0, 4.0], true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let a = bound.id("a").unwrap();
        let b = bound.id("frozen.b").unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert!(tape.grad(b).is_none());
        let grads = bound.grads(&tape, &store);
        assert!(grads.contains_key("a") && !grads.contains_key("frozen.b"));
    }
}
