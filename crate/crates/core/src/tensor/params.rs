use crate::Real;
use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A named trainable array together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<Real>,
}

/// Parameters addressable by stable dotted names (`encoder.stage1.weight`).
///
/// Iteration is in name order, which fixes checkpoint layout and the order
/// of every reduction over parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = vec![0.0; value.numel()];
        self.params.insert(name.into(), Param { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the tape's gradients for every bound parameter into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &BTreeMap<String, Var>) -> Result<()> {
        for (name, &v) in vars {
            let p = self.get_mut(name)?;
            if let Some(g) = tape.grad(v) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    /// Clamps every value into `[-c, c]`.
    pub fn clamp_values(&mut self, c: Real) {
        for p in self.params.values_mut() {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = v.clamp(-c, c));
        }
    }

    pub fn max_abs(&self) -> Real {
        self.params
            .values()
            .fold(0.0 as Real, |m, p| m.max(p.value.max_abs()))
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Lazily places store parameters on a tape, once per name.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl<'s> Binder<'s> {
    /// `trainable = false` binds the values as constants.
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = tape.leaf(value, self.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for parameter `name` instead of the stored value.
    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn into_vars(self) -> BTreeMap<String, Var> {
        self.vars
    }
}
