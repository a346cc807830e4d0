//! Named parameter registry and its per-tape binding.
//!
//! Layers hold `PId` handles into one flat registry, so counting, saving,
//! and optimizer updates all walk a single ordered list. During a forward
//! pass each parameter is bound to exactly one tape leaf, which is what
//! makes gradient accumulation across fan-out land in one place.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Element, Tensor};

/// Handle to a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(usize);

/// Ordered name -> tensor registry; every trainable tensor exactly once.
pub struct Params<E: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> Default for Params<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Params<E> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Result<PId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!(
                "parameter '{}' registered twice",
                name
            )));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(PId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: PId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<PId> {
        self.index.get(name).copied().map(PId)
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.tensors.len()).map(PId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    /// Total element count over the registry.
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Convert every tensor's precision (for f64 gradient checking).
    pub fn cast<T: Element>(&self) -> Params<T> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// One forward pass: a tape plus the parameter-to-leaf binding.
pub struct Graph<'p, E: Element> {
    pub tape: Tape<E>,
    params: &'p Params<E>,
    bound: Vec<Option<Var>>,
}

impl<'p, E: Element> Graph<'p, E> {
    pub fn new(params: &'p Params<E>) -> Self {
        Self::with_tape(params, Tape::new())
    }

    /// Wrap an existing tape (e.g. one that already holds input leaves).
    pub fn with_tape(params: &'p Params<E>, tape: Tape<E>) -> Self {
        Graph {
            tape,
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn into_tape(self) -> Tape<E> {
        self.tape
    }

    /// Leaf var for a parameter; bound once, reused on later requests.
    pub fn p(&mut self, id: PId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.get(id).clone())?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn params(&self) -> &Params<E> {
        self.params
    }

    /// Gradients for every registered parameter, in registry order.
    /// Parameters never bound or unreached by backward get zeros.
    pub fn param_grads(&self, grads: &Gradients<E>) -> Vec<Tensor<E>> {
        self.params
            .ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => grads.get_or_zeros(v, self.params.get(id).shape()),
                None => Tensor::zeros(self.params.get(id).shape()),
            })
            .collect()
    }
}
