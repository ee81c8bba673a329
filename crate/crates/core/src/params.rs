//! Named collections of trainable tensors and their binding onto a tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Trainable tensors keyed by dotted name (`"enc.conv1.weight"`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Tape handles for every tensor of a store, produced by [`ParameterStore::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binding assembled from explicit `(name, var)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Adds a parameter; it is always marked trainable.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Records every tensor on `tape` as a constant (no gradient flows back).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.variable(t.detached())
                } else {
                    tape.constant(t.detached())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients computed on `tape` into each tensor's `grad`.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (name, var) in bound.iter() {
            if !tape.requires_grad(var) {
                continue;
            }
            let tensor = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
            let g = tape.grad(var).ok_or_else(|| {
                Error::Usage(format!("no gradient recorded for `{name}`; run backward first"))
            })?;
            match &mut tensor.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &g)| *a += g),
                None => tensor.grad = Some(g.to_vec()),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Drops all gradient buffers.
    pub fn clear_grads(&mut self) {
        self.tensors.values_mut().for_each(|t| t.grad = None);
    }

    /// True when both stores hold the same names with bit-identical values.
    pub fn same_values(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits_eq(*y))
            })
    }
}

/// Bitwise equality that also treats matching NaN payloads as equal.
trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        let (a, b) = (self.as_f64(), other.as_f64());
        a.to_bits() == b.to_bits()
    }
}
