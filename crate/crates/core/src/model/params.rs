//! Ordered, named parameter storage shared by the model, the optimizer,
//! and the checkpoint container.

use std::collections::HashMap;

use crate::autodiff::{Tape, Vid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Insertion-ordered map of parameter name → tensor. The order defines the
/// checkpoint record layout and the optimizer state layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Number of scalar parameters across all tensors.
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on the tape, in store order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams { ids }
    }
}

/// Tape handles for one binding of a [`ParamStore`], aligned with its order.
pub struct BoundParams {
    ids: Vec<Vid>,
}

impl BoundParams {
    pub fn id_at(&self, position: usize) -> Vid {
        self.ids[position]
    }

    pub fn ids(&self) -> &[Vid] {
        &self.ids
    }
}
