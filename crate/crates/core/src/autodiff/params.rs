use std::sync::atomic::{AtomicU64, Ordering};

use super::graph::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Identifies one parameter tensor within one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
}

/// Named parameter tensors with gradient slots.
///
/// Clones keep the store identity, so a clone's ids remain valid on it.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    id: u64,
    params: Vec<Param<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = vec![T::zero(); value.len()];
        self.params.push(Param { name, value, grad });
        ParamId {
            store: self.id,
            index: self.params.len() - 1,
        }
    }

    fn check(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.id, "parameter id from a different store");
        id.index
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[self.check(id)].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let i = self.check(id);
        &mut self.params[i].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[self.check(id)].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId {
            store: self.id,
            index,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|index| ParamId {
                store: self.id,
                index,
            })
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds the gradients of every leaf of `graph` bound from this store.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (id, g) in graph.param_grads() {
            if id.store != self.id {
                continue;
            }
            let slot = &mut self.params[id.index].grad;
            slot.iter_mut().zip(g).for_each(|(s, &v)| *s = *s + v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Copies values by name from `other`; names and shapes must match.
    pub fn load_values(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = other
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Copy of this store in another precision. The copy keeps this store's
    /// identity so ids minted here stay valid on it.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            id: self.id,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.iter().map(|g| U::of(g.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Raw little-endian bytes of every value, in order. Used to compare
    /// initializations bit for bit.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            p.value.data().iter().for_each(|v| v.write_le(&mut out));
        }
        out
    }
}

/// Anything that owns a parameter store.
pub trait Module<T: Element> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
}

impl<T: Element> Module<T> for ParamStore<T> {
    fn params(&self) -> &ParamStore<T> {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        self
    }
}
