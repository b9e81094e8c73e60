use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tape::Gradients;
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Param<E: Scalar = f32> {
    name: String,
    value: Arc<Tensor4<E>>,
    grad: Tensor4<E>,
}

impl<E: Scalar> Param<E> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor4<E> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor4<E> {
        &self.grad
    }
}

/// Ordered, name-keyed trainable tensors, each with a gradient buffer of the
/// same shape.
///
/// Values are reference counted so a [`Tape`](super::Tape) can hold them
/// without copying; mutating a value while a tape still references it copies
/// on write.
#[derive(Debug)]
pub struct ParamStore<E: Scalar = f32> {
    id: u64,
    entries: Vec<Param<E>>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        ParamStore {
            id: next_id(),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<E: Scalar> Clone for ParamStore<E> {
    fn clone(&self) -> Self {
        ParamStore {
            id: next_id(),
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new((*p.value).clone()),
                    grad: p.grad.clone(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Two stores are equal when they hold the same names, in the same order,
/// with bit-identical values. Gradients are not compared.
impl<E: Scalar> PartialEq for ParamStore<E> {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Identifier used to route tape gradients back to this store.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4<E>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let i = self.entries.len();
        self.index.insert(name.clone(), i);
        self.entries.push(Param {
            name,
            grad: Tensor4::zeros(value.shape()),
            value: Arc::new(value),
        });
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4<E>> {
        self.index.get(name).map(|&i| &*self.entries[i].value)
    }

    pub fn entry(&self, i: usize) -> &Param<E> {
        &self.entries[i]
    }

    pub(crate) fn shared_value(&self, i: usize) -> Arc<Tensor4<E>> {
        Arc::clone(&self.entries[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor4<E> {
        Arc::make_mut(&mut self.entries[i].value)
    }

    pub fn grad_mut(&mut self, i: usize) -> &mut Tensor4<E> {
        &mut self.entries[i].grad
    }

    /// Value and gradient of entry `i`, the value writable.
    pub fn value_and_grad_mut(&mut self, i: usize) -> (&mut Tensor4<E>, &Tensor4<E>) {
        let p = &mut self.entries[i];
        (Arc::make_mut(&mut p.value), &p.grad)
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|p| p.grad.fill_zero());
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients that a tape routed to this store.
    pub fn accumulate(&mut self, grads: &Gradients<E>) -> Result<()> {
        for (i, g) in grads.param_grads(self.id) {
            let p = &mut self.entries[i];
            p.grad.add_assign(g).map_err(|e| e.in_layer(p.name.clone()))?;
        }
        Ok(())
    }

    pub fn cast<F: Scalar>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.insert(p.name.clone(), p.value.cast())
                .expect("names already unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Shape;

    #[test]
    fn names_unique_and_ordered() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor4::zeros(Shape::vector(2))).unwrap();
        s.insert("a", Tensor4::zeros(Shape::vector(3))).unwrap();
        assert!(s.insert("a", Tensor4::zeros(Shape::vector(1))).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(s.num_scalars(), 5);
        assert_eq!(s.entry(1).grad().shape(), Shape::vector(3));
    }

    #[test]
    fn clone_gets_fresh_identity() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor4::filled(Shape::vector(2), 1.5)).unwrap();
        let c = s.clone();
        assert_ne!(c.id(), s.id());
        assert_eq!(c, s);
    }
}
