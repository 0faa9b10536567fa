use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ModelGraph, ScaleMode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_split, Tensor};

/// Original-vs-added partition of one layer's neurons. Added neurons are always
/// appended, so both sets are contiguous ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLedger {
    pub original_width: usize,
    pub width: usize,
    /// Softmax scaling of an attention block before its first growth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_scale: Option<ScaleMode>,
}

impl LayerLedger {
    pub fn original_indices(&self) -> Range<usize> {
        0..self.original_width
    }

    pub fn added_indices(&self) -> Range<usize> {
        self.original_width..self.width
    }

    pub fn added(&self) -> usize {
        self.width - self.original_width
    }
}

/// One block of a parameter created by dropin: indices `start..start+len` along `axis`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddedSlice {
    /// Layer whose expansion created the slice.
    pub layer: usize,
    pub param: ParamId,
    pub axis: usize,
    pub start: usize,
    pub len: usize,
}

impl AddedSlice {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Bookkeeping of every neuron and weight slice added by dropin, so pruning can
/// remove exactly those and nothing else.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronLedger {
    pub layers: BTreeMap<usize, LayerLedger>,
    pub slices: Vec<AddedSlice>,
}

impl NeuronLedger {
    /// Empty ledger covering every expandable layer of `model`.
    pub fn new(model: &ModelGraph) -> Self {
        let layers = model
            .expandable_indices()
            .into_iter()
            .map(|i| {
                let w = model.layers[i].width();
                (
                    i,
                    LayerLedger {
                        original_width: w,
                        width: w,
                        original_scale: None,
                    },
                )
            })
            .collect();
        NeuronLedger {
            layers,
            slices: Vec::new(),
        }
    }

    /// True when no neuron has been added.
    pub fn is_empty(&self) -> bool {
        self.slices.is_empty() && self.layers.values().all(|l| l.added() == 0)
    }

    /// Records a block inserted into `param` along `axis` at position `at`.
    /// Existing records at or after `at` on the same axis shift by `len`.
    pub(crate) fn record_insert(&mut self, layer: usize, param: &str, axis: usize, at: usize, len: usize) {
        for s in &mut self.slices {
            if s.param == param && s.axis == axis && s.start >= at {
                s.start += len;
            }
        }
        self.slices.push(AddedSlice {
            layer,
            param: param.to_string(),
            axis,
            start: at,
            len,
        });
    }

    pub fn touched_params(&self) -> BTreeSet<&str> {
        self.slices.iter().map(|s| s.param.as_str()).collect()
    }

    /// Union of added indices along each axis of `param`.
    pub fn added_axis_indices(&self, param: &str, ndim: usize) -> Vec<BTreeSet<usize>> {
        let mut sets = vec![BTreeSet::new(); ndim];
        for s in self.slices.iter().filter(|s| s.param == param) {
            sets[s.axis].extend(s.range());
        }
        sets
    }

    /// Element mask of `param` that is true on every element created by dropin
    /// (any coordinate lying in an added index set).
    pub fn added_mask(&self, param: &str, shape: &[usize]) -> Vec<bool> {
        let sets = self.added_axis_indices(param, shape.len());
        let n: usize = shape.iter().product();
        let mut mask = vec![false; n];
        for (axis, set) in sets.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let (outer, dim, inner) = axis_split(shape, axis);
            for o in 0..outer {
                for &k in set {
                    let base = (o * dim + k) * inner;
                    mask[base..base + inner].iter_mut().for_each(|m| *m = true);
                }
            }
        }
        mask
    }

    /// Number of parameter elements created by dropin (overlapping slices such
    /// as a recurrent corner block are counted once).
    pub fn added_param_count(&self, params: &ParamStore) -> Result<usize> {
        let mut total = 0;
        for p in self.touched_params() {
            let t = params.get(p)?;
            total += self.added_mask(p, t.shape()).iter().filter(|&&b| b).count();
        }
        Ok(total)
    }

    /// Checks that every slice names an existing parameter and is in bounds.
    pub fn validate(&self, params: &ParamStore) -> Result<()> {
        for s in &self.slices {
            let t = params.get(&s.param)?;
            if s.axis >= t.ndim() || s.start + s.len > t.shape()[s.axis] || s.len == 0 {
                return Err(Error::invalid(format!(
                    "ledger slice {s:?} out of bounds for `{}` with shape {:?}",
                    s.param,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Keeps the original (non-added) indices of `tensor` along every axis.
    pub(crate) fn strip(&self, param: &str, tensor: &Tensor) -> Tensor {
        let sets = self.added_axis_indices(param, tensor.ndim());
        let mut t = tensor.clone();
        for (axis, set) in sets.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let keep: Vec<usize> = (0..t.shape()[axis]).filter(|k| !set.contains(k)).collect();
            t = t.select_axis(axis, &keep);
        }
        t
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_shifts_later_slices_on_same_axis() {
        let mut l = NeuronLedger::default();
        l.record_insert(0, "w", 1, 2, 2); // [h0: 0,1,(2,3) | h1: 4,5]
        l.record_insert(0, "w", 1, 6, 2); // h1's block
        l.record_insert(0, "w", 1, 4, 4); // second growth of h0 lands before h1
        let ranges: Vec<_> = l.slices.iter().map(AddedSlice::range).collect();
        assert_eq!(ranges, vec![2..4, 10..12, 4..8]);
    }

    #[test]
    fn corner_block_counted_once() {
        let mut l = NeuronLedger::default();
        l.record_insert(0, "u", 1, 3, 3);
        l.record_insert(0, "u", 0, 3, 3);
        let mut p = ParamStore::new();
        p.insert("u", Tensor::zeros(&[6, 6]), true);
        // 36 total, 9 original
        assert_eq!(l.added_param_count(&p).unwrap(), 27);
        let stripped = l.strip("u", p.get("u").unwrap());
        assert_eq!(stripped.shape(), &[3, 3]);
    }

    #[test]
    fn validate_catches_out_of_range() {
        let mut l = NeuronLedger::default();
        l.record_insert(0, "b", 0, 3, 3);
        let mut p = ParamStore::new();
        p.insert("b", Tensor::zeros(&[5]), true);
        assert!(l.validate(&p).is_err());
        p.insert("b", Tensor::zeros(&[6]), true);
        assert!(l.validate(&p).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let mut l = NeuronLedger::default();
        l.layers.insert(
            2,
            LayerLedger {
                original_width: 4,
                width: 8,
                original_scale: None,
            },
        );
        l.record_insert(2, "l2.weight", 0, 4, 4);
        assert_eq!(NeuronLedger::from_json(&l.to_json().unwrap()).unwrap(), l);
    }
}
