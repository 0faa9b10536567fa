use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ledger::{LayerLedger, NeuronLedger};
use crate::error::{Error, Result};
use crate::layers::{gru::GATES, Layer, ModelGraph, Repr, ScaleMode};
use crate::params::{ParamStore, TrainMask};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Only parameters created by dropin are trained.
    #[default]
    Frozen,
    /// Every parameter is trained.
    Unfrozen,
}

/// Which layers to grow and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropinPlan {
    pub selected_layers: BTreeSet<usize>,
    /// New neurons per selected layer = round(growth_ratio × current width).
    pub growth_ratio: f64,
    /// Std-dev of new weights; `None` uses each family's fan-based scale.
    pub init_sigma: Option<f64>,
    pub freeze_policy: FreezePolicy,
    /// Softmax temperature applied to grown attention blocks.
    pub attention_scale: ScaleMode,
    pub rng_seed: u64,
}

impl DropinPlan {
    pub fn new(selected_layers: impl IntoIterator<Item = usize>) -> Self {
        DropinPlan {
            selected_layers: selected_layers.into_iter().collect(),
            growth_ratio: 1.0,
            init_sigma: None,
            freeze_policy: FreezePolicy::Frozen,
            attention_scale: ScaleMode::Expanded,
            rng_seed: 42,
        }
    }

    pub fn new_neurons(&self, width: usize) -> usize {
        (self.growth_ratio * width as f64).round() as usize
    }

    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        if self.selected_layers.is_empty() {
            return Err(Error::invalid("dropin plan selects no layers"));
        }
        if !(self.growth_ratio.is_finite() && self.growth_ratio > 0.0) {
            return Err(Error::invalid(format!("growth_ratio must be positive, got {}", self.growth_ratio)));
        }
        if let Some(s) = self.init_sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::invalid(format!("init_sigma must be non-negative, got {s}")));
            }
        }
        for &i in &self.selected_layers {
            if i >= model.num_layers() {
                return Err(Error::invalid(format!("layer {i} does not exist")));
            }
            if !model.is_expandable(i) {
                return Err(Error::invalid(format!("layer {i} ({}) is not expandable", model.layers[i].name())));
            }
            if self.new_neurons(model.layers[i].width()) == 0 {
                return Err(Error::invalid(format!(
                    "growth_ratio {} adds no neuron to layer {i} of width {}",
                    self.growth_ratio,
                    model.layers[i].width()
                )));
            }
        }
        Ok(())
    }
}

/// Samples `count` distinct expandable layer indices uniformly without replacement.
pub fn select_layers(model: &ModelGraph, count: usize, seed: u64) -> Result<BTreeSet<usize>> {
    let candidates = model.expandable_indices();
    if count == 0 || count > candidates.len() {
        return Err(Error::invalid(format!(
            "cannot select {count} layers from {} expandable",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, candidates.len(), count)
        .into_iter()
        .map(|k| candidates[k])
        .collect())
}

/// Per-layer outcome of a dropin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRecord {
    pub layer: usize,
    pub old_width: usize,
    pub new_width: usize,
    /// Elements added to the layer's own width-dependent parameters.
    pub in_layer_added: usize,
    /// Elements added to the consuming layer (new input columns / channel slices).
    pub downstream_added: usize,
}

struct Grower<'a> {
    params: &'a mut ParamStore,
    ledger: &'a mut NeuronLedger,
    rng: &'a mut ChaCha8Rng,
    sigma: Option<f64>,
    layer: usize,
    added: usize,
}

impl Grower<'_> {
    /// Inserts a block along `axis` at `at`; new values ~ N(0, σ²), or zero for biases.
    fn insert(&mut self, id: &str, axis: usize, at: usize, len: usize, family_sigma: f64, zero: bool) -> Result<()> {
        let t = self.params.get(id)?;
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let sigma = if zero { 0.0 } else { self.sigma.unwrap_or(family_sigma) };
        let block = Tensor::randn(&shape, sigma, self.rng);
        self.added += block.len();
        let grown = t.insert_axis(axis, at, &block)?;
        let trainable = self.params.is_trainable(id);
        self.params.replace(id, grown)?;
        if trainable {
            self.params.set_trainable(id, true)?;
        }
        self.ledger.record_insert(self.layer, id, axis, at, len);
        Ok(())
    }

    fn append(&mut self, id: &str, axis: usize, len: usize, family_sigma: f64, zero: bool) -> Result<()> {
        let at = self.params.get(id)?.shape()[axis];
        self.insert(id, axis, at, len, family_sigma, zero)
    }
}

/// Appends `round(growth_ratio × width)` neurons to every selected layer by
/// block-matrix concatenation, adds the matching input slices to each consuming
/// layer, and records every created slice in the ledger.
///
/// The operation is atomic: on error, `model`, `params` and `ledger` are unchanged.
pub fn dropin(
    model: &mut ModelGraph,
    params: &mut ParamStore,
    ledger: &mut NeuronLedger,
    plan: &DropinPlan,
) -> Result<Vec<GrowthRecord>> {
    plan.validate(model)?;
    ledger.validate(params)?;
    let mut m = model.clone();
    let mut p = params.clone();
    let mut l = ledger.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.rng_seed);
    let mut records = Vec::new();
    for &i in &plan.selected_layers {
        records.push(grow_layer(&mut m, &mut p, &mut l, &mut rng, plan, i)?);
    }
    l.validate(&p)?;
    *model = m;
    *params = p;
    *ledger = l;
    Ok(records)
}

fn grow_layer(
    model: &mut ModelGraph,
    params: &mut ParamStore,
    ledger: &mut NeuronLedger,
    rng: &mut ChaCha8Rng,
    plan: &DropinPlan,
    i: usize,
) -> Result<GrowthRecord> {
    let old_width = model.layers[i].width();
    let old_scale = match &model.layers[i] {
        Layer::Attention(a) => Some(a.scale_mode),
        _ => None,
    };
    let m = plan.new_neurons(old_width);
    let mut g = Grower {
        params,
        ledger,
        rng,
        sigma: plan.init_sigma,
        layer: i,
        added: 0,
    };
    match &mut model.layers[i] {
        Layer::Dense(d) => {
            let s = d.weight_sigma();
            g.append(&d.weight_id(), 0, m, s, false)?;
            g.append(&d.bias_id(), 0, m, s, true)?;
        }
        Layer::Conv2d(c) => {
            let s = c.weight_sigma();
            g.append(&c.weight_id(), 0, m, s, false)?;
            g.append(&c.bias_id(), 0, m, s, true)?;
        }
        Layer::Gru(r) => {
            let h = r.hidden_dim;
            let sw = (1.0 / r.input_dim as f64).sqrt();
            let su = (1.0 / h as f64).sqrt();
            for gate in GATES {
                g.append(&r.w_id(gate), 0, m, sw, false)?;
                // U -> [[U, C], [R, D]]: new columns, then new rows spanning the widened matrix
                g.append(&r.u_id(gate), 1, m, su, false)?;
                g.append(&r.u_id(gate), 0, m, su, false)?;
                g.append(&r.b_id(gate), 0, m, su, true)?;
            }
        }
        Layer::Attention(a) => {
            let hd = a.head_dim;
            let sq = (1.0 / a.model_dim as f64).sqrt();
            let so = (1.0 / (a.num_heads * hd) as f64).sqrt();
            for h in 0..a.num_heads {
                for kind in ["q", "k", "v"] {
                    g.append(&a.proj_id(kind, h), 0, m, sq, false)?;
                }
            }
            for h in 0..a.num_heads {
                g.insert(&a.out_id(), 1, h * (hd + m) + hd, m, so, false)?;
            }
            a.scale_mode = plan.attention_scale;
        }
    }
    let in_layer_added = g.added;
    g.added = 0;

    // consumer of the new neurons: next layer, or the head
    if !matches!(model.layers[i], Layer::Attention(_)) {
        let produced = model.repr_before(i + 1);
        let per_neuron = match produced {
            Repr::Image { height, width, .. } => height * width,
            _ => 1,
        };
        let consumer = model.layers.get(i + 1);
        match consumer {
            Some(Layer::Conv2d(c)) => {
                let s = c.weight_sigma();
                g.insert(&c.weight_id(), 1, old_width, m, s, false)?;
            }
            Some(Layer::Dense(d)) => {
                let s = d.weight_sigma();
                g.insert(&d.weight_id(), 1, old_width * per_neuron, m * per_neuron, s, false)?;
            }
            None => {
                let s = model.head.weight_sigma();
                let id = model.head.weight_id();
                g.insert(&id, 1, old_width * per_neuron, m * per_neuron, s, false)?;
            }
            Some(other) => {
                return Err(Error::invalid(format!(
                    "layer {i} feeds a {} layer, which cannot absorb new inputs",
                    other.kind()
                )))
            }
        }
    }
    let downstream_added = g.added;

    model.layers[i].set_width(old_width + m);
    model.propagate_dims()?;
    let entry = ledger.layers.entry(i).or_insert(LayerLedger {
        original_width: old_width,
        width: old_width,
        original_scale: None,
    });
    if entry.width == entry.original_width {
        entry.original_scale = old_scale;
    }
    entry.width = old_width + m;
    Ok(GrowthRecord {
        layer: i,
        old_width,
        new_width: old_width + m,
        in_layer_added,
        downstream_added,
    })
}

/// Sets trainability according to `policy`.
///
/// `Frozen` makes exactly the ledger's added slices trainable (the head only
/// where it received new input columns); `Unfrozen` makes everything trainable.
pub fn apply_freeze(params: &mut ParamStore, ledger: &NeuronLedger, policy: FreezePolicy) -> Result<()> {
    apply_freeze_with(params, ledger, policy, &[])
}

/// [`apply_freeze`] with extra parameters that stay fully trainable under `Frozen`.
pub fn apply_freeze_with(
    params: &mut ParamStore,
    ledger: &NeuronLedger,
    policy: FreezePolicy,
    also_trainable: &[String],
) -> Result<()> {
    match policy {
        FreezePolicy::Unfrozen => {
            params.unfreeze_all();
            Ok(())
        }
        FreezePolicy::Frozen => {
            if ledger.slices.is_empty() {
                return Err(Error::invalid("frozen policy requires a non-empty neuron ledger"));
            }
            ledger.validate(params)?;
            params.freeze_all();
            for id in ledger.touched_params() {
                let shape = params.get(id)?.shape().to_vec();
                params.set_mask(id, ledger.added_mask(id, &shape))?;
            }
            for id in also_trainable {
                params.set_trainable(id, true)?;
            }
            Ok(())
        }
    }
}

/// Removes every neuron and slice recorded in the ledger, restoring the
/// pre-dropin architecture. Surviving entries keep their current values.
pub fn prune(model: &mut ModelGraph, params: &mut ParamStore, ledger: &mut NeuronLedger) -> Result<()> {
    if ledger.is_empty() {
        return Err(Error::invalid("nothing to prune: the neuron ledger is empty"));
    }
    ledger.validate(params)?;
    let mut m = model.clone();
    let mut p = params.clone();
    for id in ledger.touched_params() {
        let t = p.get(id)?.clone();
        let stripped = ledger.strip(id, &t);
        let mask = match p.mask(id) {
            None => None,
            Some(TrainMask::All) => Some(TrainMask::All),
            Some(TrainMask::Elements(bits)) => {
                let as_f: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let kept = ledger.strip(id, &Tensor::new(t.shape().to_vec(), as_f)?);
                let bits: Vec<bool> = kept.values().iter().map(|&v| v != 0.0).collect();
                if bits.iter().all(|&b| !b) {
                    None
                } else if bits.iter().all(|&b| b) {
                    Some(TrainMask::All)
                } else {
                    Some(TrainMask::Elements(bits))
                }
            }
        };
        p.insert_with_mask(id.to_string(), stripped, mask);
    }
    for (&i, entry) in &ledger.layers {
        let layer = &mut m.layers[i];
        layer.set_width(entry.original_width);
        if let Layer::Attention(a) = layer {
            a.original_head_dim = entry.original_width;
            if let Some(mode) = entry.original_scale {
                a.scale_mode = mode;
            }
        }
    }
    m.propagate_dims()?;
    *model = m;
    *params = p;
    for entry in ledger.layers.values_mut() {
        entry.width = entry.original_width;
        entry.original_scale = None;
    }
    ledger.slices.clear();
    Ok(())
}

/// Element count of a layer's width-dependent parameters.
pub fn in_layer_param_count(model: &ModelGraph, params: &ParamStore, layer: usize) -> Result<usize> {
    model.layers[layer]
        .width_param_ids()
        .iter()
        .map(|id| params.get(id).map(Tensor::len))
        .sum()
}
