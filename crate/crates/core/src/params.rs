//! Named parameter tensors with per-parameter (and optionally per-element) trainability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamId = String;

/// Which elements of a parameter receive optimizer updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMask {
    All,
    /// Row-major element mask with the same length as the parameter.
    Elements(Vec<bool>),
}

impl TrainMask {
    pub fn count(&self, len: usize) -> usize {
        match self {
            TrainMask::All => len,
            TrainMask::Elements(m) => m.iter().filter(|&&b| b).count(),
        }
    }

    pub fn allows(&self, i: usize) -> bool {
        match self {
            TrainMask::All => true,
            TrainMask::Elements(m) => m[i],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<ParamId, Tensor>,
    trainable: BTreeMap<ParamId, TrainMask>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a parameter. Replacing resets its trainability.
    pub fn insert(&mut self, id: impl Into<ParamId>, value: Tensor, trainable: bool) {
        let id = id.into();
        if trainable {
            self.trainable.insert(id.clone(), TrainMask::All);
        } else {
            self.trainable.remove(&id);
        }
        self.entries.insert(id, value);
    }

    /// Replaces the tensor of an existing parameter, dropping any partial mask
    /// (a whole-tensor trainable flag is kept).
    pub fn replace(&mut self, id: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(id)
            .ok_or_else(|| Error::MissingParam(id.to_string()))?;
        *slot = value;
        if let Some(TrainMask::Elements(_)) = self.trainable.get(id) {
            self.trainable.insert(id.to_string(), TrainMask::All);
        }
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Option<Tensor> {
        self.trainable.remove(id);
        self.entries.remove(id)
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::MissingParam(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(id)
            .ok_or_else(|| Error::MissingParam(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_trainable(&self, id: &str) -> bool {
        self.trainable.contains_key(id)
    }

    pub fn mask(&self, id: &str) -> Option<&TrainMask> {
        self.trainable.get(id)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.trainable.keys()
    }

    pub fn set_trainable(&mut self, id: &str, trainable: bool) -> Result<()> {
        if !self.entries.contains_key(id) {
            return Err(Error::MissingParam(id.to_string()));
        }
        if trainable {
            self.trainable.insert(id.to_string(), TrainMask::All);
        } else {
            self.trainable.remove(id);
        }
        Ok(())
    }

    /// Sets an element-level mask. An all-false mask removes the parameter from
    /// the trainable set; an all-true mask is stored as [`TrainMask::All`].
    pub fn set_mask(&mut self, id: &str, mask: Vec<bool>) -> Result<()> {
        let t = self.get(id)?;
        if mask.len() != t.len() {
            return Err(Error::invalid(format!(
                "mask for `{id}` has {} entries, parameter has {}",
                mask.len(),
                t.len()
            )));
        }
        if mask.iter().all(|&b| !b) {
            self.trainable.remove(id);
        } else if mask.iter().all(|&b| b) {
            self.trainable.insert(id.to_string(), TrainMask::All);
        } else {
            self.trainable.insert(id.to_string(), TrainMask::Elements(mask));
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn unfreeze_all(&mut self) {
        self.trainable = self
            .entries
            .keys()
            .map(|k| (k.clone(), TrainMask::All))
            .collect();
    }

    /// Exact element count over all parameters, or only the trainable elements.
    pub fn param_count(&self, trainable_only: bool) -> usize {
        if trainable_only {
            self.trainable
                .iter()
                .map(|(id, m)| m.count(self.entries[id].len()))
                .sum()
        } else {
            self.entries.values().map(Tensor::len).sum()
        }
    }

    pub fn snapshot(&self) -> ParamStore {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &ParamStore) {
        *self = snapshot.clone();
    }

    /// Bit-level equality of ids, shapes, values, and trainability.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.trainable == other.trainable
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.values()
                        .iter()
                        .zip(b.values())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub(crate) fn insert_with_mask(&mut self, id: ParamId, value: Tensor, mask: Option<TrainMask>) {
        match mask {
            Some(m) => {
                self.trainable.insert(id.clone(), m);
            }
            None => {
                self.trainable.remove(&id);
            }
        }
        self.entries.insert(id, value);
    }
}

/// Free-function form of [`ParamStore::param_count`].
pub fn param_count(params: &ParamStore, trainable_only: bool) -> usize {
    params.param_count(trainable_only)
}
