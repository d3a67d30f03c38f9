use std::collections::BTreeMap;

use super::{Graph, Real, Tensor, Var};

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<R = f32> {
    tensors: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<R>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<R>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<R>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Adds `other` into `self`, name by name. Names missing from `self` are
    /// inserted.
    pub fn accumulate(&mut self, other: &ParamStore<R>) {
        for (name, t) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(dst) => {
                    for (d, s) in dst.data_mut().iter_mut().zip(t.data()) {
                        *d += *s;
                    }
                }
                None => {
                    self.tensors.insert(name.clone(), t.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: R) {
        for t in self.tensors.values_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn extend_with_prefix(&mut self, other: &ParamStore<R>, prefix: &str) {
        for (name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.insert(name.clone(), t.clone());
            }
        }
    }
}

/// Graph handles for every tensor of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Params {
    vars: BTreeMap<String, Var>,
}

impl Params {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl std::ops::Index<&str> for Params {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not bound"))
    }
}

impl<R: Real> Graph<R> {
    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore<R>) -> Params {
        Params {
            vars: store
                .iter()
                .map(|(name, t)| (name.clone(), self.leaf(t.clone())))
                .collect(),
        }
    }
}
