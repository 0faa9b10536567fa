#![allow(dead_code)]

use dropin_core::layers::{InputSpec, LayerSpec, ModelGraph, ModelSpec, ScaleMode};
use dropin_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units, expandable: true }
}

pub fn conv(channels: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        channels,
        kernel: 3,
        stride,
        padding: 1,
        expandable: true,
    }
}

pub fn gru(hidden: usize) -> LayerSpec {
    LayerSpec::Gru { hidden, expandable: true }
}

pub fn attention(heads: usize, head_dim: usize, ffn_dim: usize, scale_mode: ScaleMode) -> LayerSpec {
    LayerSpec::Attention {
        heads,
        head_dim,
        ffn_dim,
        scale_mode,
        expandable: true,
    }
}

pub fn spec(name: &str, input: InputSpec, layers: Vec<LayerSpec>) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        input,
        layers,
    }
}

/// Small model of each family over `[freq, time]` features.
pub fn family_models() -> Vec<(&'static str, ModelGraph)> {
    vec![
        (
            "dense",
            ModelGraph::from_spec(&spec("mlp", InputSpec::Flat, vec![dense(6), dense(5)]), 3, 4).unwrap(),
        ),
        (
            "conv",
            ModelGraph::from_spec(&spec("cnn", InputSpec::Image, vec![conv(3, 1), conv(4, 2), dense(5)]), 6, 8)
                .unwrap(),
        ),
        (
            "gru",
            ModelGraph::from_spec(&spec("rnn", InputSpec::Sequence, vec![gru(4), dense(3)]), 3, 5).unwrap(),
        ),
        (
            "attention",
            ModelGraph::from_spec(
                &spec(
                    "enc",
                    InputSpec::Sequence,
                    vec![attention(2, 3, 5, ScaleMode::Original), dense(3)],
                ),
                4,
                5,
            )
            .unwrap(),
        ),
    ]
}

pub fn init(model: &ModelGraph, seed: u64) -> ParamStore {
    model.init_params(&mut rng(seed))
}

pub fn random_batch(model: &ModelGraph, batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&model.input_shape(batch), 1.0, rng)
}

pub fn random_targets(batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::from_vec((0..batch).map(|_| rng.random_range(0..2) as f64).collect())
}
