use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

/// Named parameter tensors in a fixed insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Places every parameter on `tape` as a borrowed leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, requires_grad: bool) -> Bound<'p> {
        let vars = self.tensors.iter().map(|t| tape.leaf_ref(t, requires_grad)).collect();
        Bound { store: self, vars }
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
pub struct Bound<'p> {
    store: &'p ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Parameter initializer drawing each tensor from its own stream.
pub(crate) struct Init {
    rng: Rng,
    next: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: Rng::new(seed).fork(0x1417),
            next: 0,
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        self.next += 1;
        let mut t = self.rng.fork(self.next).standard_normal(shape);
        t.data_mut().iter_mut().for_each(|v| *v *= std);
        t
    }
}
