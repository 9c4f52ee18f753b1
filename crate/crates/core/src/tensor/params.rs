use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

/// Named learnable arrays, iterated in sorted-name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let grad = Array2::zeros(value.raw_dim());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    /// Insert a `rows×cols` parameter drawn uniformly from `[-bound, bound]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        self.insert(name, value)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Array2<f64>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Record parameter `name` on `tape` as a differentiable leaf.
    pub fn var(&self, tape: &Tape, name: &str) -> Result<Var> {
        let p = self.get(name)?;
        Ok(tape.leaf(p.value.clone(), Some(Rc::from(name))))
    }

    /// Add the gradients of every leaf on `tape` that names one of this
    /// store's parameters. Leaves naming other stores are ignored.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (name, v) in tape.param_leaves() {
            if let (Some(p), Some(g)) = (self.params.get_mut(&*name), grads.wrt(v)) {
                p.grad += g;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Sub-store of the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Merge another store in; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::contract(format!("duplicate parameter name {k:?}")));
            }
            self.params.insert(k, v);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|p| p.value.iter().all(|x| x.is_finite()))
    }
}

/// Rescale all gradients so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .params
        .values()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for p in params.params.values_mut() {
            p.grad.mapv_inplace(|g| g * f);
        }
    }
    norm
}

/// `θ ← θ − lr·grad` for every parameter, then zero the gradients.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    for p in params.params.values_mut() {
        p.value.scaled_add(-lr, &p.grad);
        p.grad.fill(0.0);
    }
    Ok(())
}
