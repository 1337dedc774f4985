use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Whether a tensor is a learnable parameter or a statistic buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Running statistics; never trainable.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
    /// Present exactly when the tensor is trainable.
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn is_trainable(&self) -> bool {
        self.grad.is_some()
    }
}

/// Named tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind, trainable: bool) {
        let trainable = trainable && kind == ParamKind::Weight;
        let grad = trainable.then(|| Tensor::zeros(value.shape()));
        self.params.insert(name.into(), Param { value, kind, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.param(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.is_trainable())
    }

    /// Marks a weight trainable or frozen. Buffers stay frozen.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if trainable && p.kind == ParamKind::Buffer {
            return Err(Error::Validation(format!("buffer `{name}` cannot be trainable")));
        }
        p.grad = trainable.then(|| Tensor::zeros(p.value.shape()));
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `grad` into the gradient slot of `name`; no-op when frozen.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(Param { grad: Some(slot), .. }) => slot.add_assign(grad),
            Some(_) => Ok(()),
            None => Err(Error::Config(format!("missing parameter `{name}`"))),
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
            g.fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over weights (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies tensors whose names start with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }

    /// True when every tensor value is bit-identical to `other`'s.
    pub fn values_bit_identical(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(k, p)| {
                other.params.get(k).is_some_and(|q| {
                    p.value.shape() == q.value.shape()
                        && p.value
                            .data()
                            .iter()
                            .zip(q.value.data())
                            .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
                })
            })
    }
}
