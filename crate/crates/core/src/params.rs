//! Named model parameters partitioned into backbone, attention and
//! conditioning groups, each flagged trainable or frozen.

use crate::autodiff::GradMap;
use crate::error::{bail, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// UNet convolutional backbone, time embedding and projections.
    Backbone,
    /// Weights of the attention modules.
    Attention,
    /// Class embedding table.
    Conditioning,
    /// Low-rank adapter factors.
    Adapter,
    /// Autoencoder weights.
    Autoencoder,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Attention => 1,
            ParamGroup::Conditioning => 2,
            ParamGroup::Adapter => 3,
            ParamGroup::Autoencoder => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamGroup::Backbone,
            1 => ParamGroup::Attention,
            2 => ParamGroup::Conditioning,
            3 => ParamGroup::Adapter,
            4 => ParamGroup::Autoencoder,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which fixes the layout of flattened gradient vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, group: ParamGroup, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            bail!(Contract, "parameter {name} registered twice");
        }
        let value = value.with_grad(false);
        self.params.insert(name.to_string(), Param { value, group, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
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

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        match self.params.get_mut(name) {
            Some(p) => {
                p.trainable = trainable;
                Ok(())
            }
            None => bail!(Config, "unknown parameter {name}"),
        }
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.trainable = false);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect()
    }

    /// Scalar count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.params.values().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Zero gradient map keyed by the trainable parameters.
    pub fn zero_grads(&self) -> GradMap {
        GradMap::zeros(
            self.params
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(k, p)| (k.as_str(), p.value.shape())),
        )
    }

    /// Plain gradient step `θ ← θ − lr·g` on the trainable parameters.
    pub fn sgd_step(&mut self, grads: &GradMap, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let Some(p) = self.params.get_mut(name) else {
                bail!(Contract, "gradient for unknown parameter {name}");
            };
            if !p.trainable {
                bail!(Contract, "gradient step on frozen parameter {name}");
            }
            if g.shape() != p.value.shape() {
                bail!(Dimension, "gradient {name}: {:?} for parameter {:?}", g.shape(), p.value.shape());
            }
            for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }

    /// Parameters whose values differ bitwise between two stores.
    pub fn changed_between(&self, other: &ParamStore) -> Vec<String> {
        self.params
            .iter()
            .filter(|(k, p)| {
                other.params.get(*k).map_or(true, |q| {
                    p.value.shape() != q.value.shape()
                        || p.value.data().iter().zip(q.value.data()).any(|(a, b)| a.to_bits() != b.to_bits())
                })
            })
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.shift_remove(name)
    }
}
