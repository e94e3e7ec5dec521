use std::collections::HashMap;

use super::{Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(true),
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.grad = None);
    }

    /// Adds the gradients a graph computed for its bound parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, var) in graph.param_bindings() {
            if let Some(g) = graph.grad(var) {
                self.params[id.0].tensor.accumulate_grad(g);
            }
        }
    }

    /// Replaces every value with the same-named value from `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}
