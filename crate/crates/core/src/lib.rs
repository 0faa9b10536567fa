//! Neuron-level network growth ("dropin") and grow-train-prune plasticity for
//! small dense, convolutional, recurrent and attention networks.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod growth;
pub mod harness;
pub mod layers;
pub mod optim;
pub mod params;
pub mod plasticity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{param_count, ParamId, ParamStore, TrainMask};
pub use tensor::Tensor;
