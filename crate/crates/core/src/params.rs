//! Named parameter storage shared by every module of the model.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Frozen encoder weights: serialized but never updated.
    Frozen,
    /// Visual-encoder adapters (lower learning rate).
    Adapter,
    /// Every other learnable parameter.
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Zero tensors shaped like every parameter, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// Order-sensitive FNV-1a digest over names and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::hash::Fnv1a::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            for x in p.value.data() {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Copies values for every parameter whose name and shape match `other`.
    /// Returns the number of parameters loaded.
    pub fn load_from(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    n += 1;
                }
            }
        }
        n
    }
}
