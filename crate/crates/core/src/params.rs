//! Named parameter storage shared by every model in the crate.

use std::path::Path;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::format;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter of a store, valid for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Adds the tape gradients of every bound parameter into its
    /// [`Tensor::grad`] buffer.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let named: Vec<(String, &Tensor)> = self.names.iter().cloned().zip(&self.tensors).collect();
        format::write_named(path, &named)
    }

    /// Overwrites every parameter from a named checkpoint. Names and shapes
    /// must match exactly.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let loaded = format::read_named(path)?;
        if loaded.len() != self.tensors.len() {
            return Err(config_err!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                self.tensors.len()
            ));
        }
        for (name, t) in loaded {
            let id = self
                .find(&name)
                .ok_or_else(|| config_err!("checkpoint tensor {name:?} is not a model parameter"))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(dim_err!(
                    "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                ));
            }
            self.tensors[id.0] = t.with_grad();
        }
        Ok(())
    }
}
