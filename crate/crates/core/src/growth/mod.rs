//! The dropin engine: layer selection, block-matrix neuron expansion, the neuron
//! ledger, freeze policies, pruning, and the LoRA comparison baseline.

mod dropin;
mod ledger;
mod lora;

pub use dropin::{
    apply_freeze, apply_freeze_with, dropin, in_layer_param_count, prune, select_layers, DropinPlan,
    FreezePolicy, GrowthRecord,
};
pub use ledger::{AddedSlice, LayerLedger, NeuronLedger};
pub use lora::{lora_wrap, LoraAdapter};
