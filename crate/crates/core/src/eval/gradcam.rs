use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Graph;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::layers::{Layer, ModelGraph, NUM_CLASSES};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Gradient-weighted class activation map of conv layer `target_layer` for one
/// input, shaped like that layer's feature maps `[H', W']` and scaled to [0, 1]
/// (an all-zero map stays zero).
///
/// `input` is a single sample, with or without the leading batch axis.
pub fn gradcam(
    model: &ModelGraph,
    params: &ParamStore,
    input: &Tensor,
    target_layer: usize,
    class_index: usize,
) -> Result<Tensor> {
    let (maps, grads) = feature_maps_and_grads(model, params, input, target_layer, class_index)?;
    Ok(cam_from_maps(&maps, &grads))
}

/// Post-activation feature maps `[C, H, W]` of `target_layer` and the gradient
/// of the class logit with respect to them.
pub fn feature_maps_and_grads(
    model: &ModelGraph,
    params: &ParamStore,
    input: &Tensor,
    target_layer: usize,
    class_index: usize,
) -> Result<(Tensor, Tensor)> {
    match model.layers.get(target_layer) {
        Some(Layer::Conv2d(_)) => {}
        Some(other) => {
            return Err(Error::invalid(format!(
                "grad-cam target layer {target_layer} is {}, not conv2d",
                other.kind()
            )))
        }
        None => return Err(Error::invalid(format!("model has no layer {target_layer}"))),
    }
    if class_index >= NUM_CLASSES {
        return Err(Error::invalid(format!("class index {class_index} out of range")));
    }
    let shape = model.input_shape(1);
    let x = input.reshape(shape.clone()).map_err(|_| {
        Error::invalid(format!("grad-cam input {:?} does not fit {:?}", input.shape(), shape))
    })?;

    let mut g = Graph::new();
    let nodes = model.build(&mut g, 1);
    let mut onehot = Tensor::zeros(&[1, NUM_CLASSES]);
    onehot.values_mut()[class_index] = 1.0;
    let sel = g.constant(onehot);
    let picked = g.mul(nodes.logits, sel);
    let out = g.sum(picked);
    g.set_output(out);
    let target = nodes.layer_outputs[target_layer];
    g.retain_grad(target);
    g.forward(&[x], params)?;
    g.backward(params)?;

    let a = g.value(target).expect("forward ran").clone();
    let grad = g
        .node_grad(target)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(a.shape()));
    let s = a.shape()[1..].to_vec();
    Ok((a.reshape(s.clone())?, grad.reshape(s)?))
}

/// ReLU(Σ_c α_c A_c) with α_c the spatial mean of the gradient, min-max scaled.
pub fn cam_from_maps(maps: &Tensor, grads: &Tensor) -> Tensor {
    let (c, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let hw = h * w;
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let g = &grads.values()[ch * hw..(ch + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        let a = &maps.values()[ch * hw..(ch + 1) * hw];
        for (o, v) in cam.iter_mut().zip(a) {
            *o += alpha * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in &mut cam {
            *v = (*v - lo) / (hi - lo);
        }
    } else if hi > 0.0 {
        cam.iter_mut().for_each(|v| *v = 1.0);
    }
    Tensor::from_parts(vec![h, w], cam)
}

/// Plain-text matrix: one row per line, space-separated values.
pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let (rows, cols) = match m.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::invalid(format!("expected a matrix, got shape {s:?}"))),
    };
    let mut out = String::new();
    for r in 0..rows {
        let row = &m.values()[r * cols..(r + 1) * cols];
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
