use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AttentionBlock, BuildCtx, Conv2dLayer, DenseLayer, GruLayer, ScaleMode};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::growth::LoraAdapter;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a `[freq, time]` feature matrix is presented to the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    /// `[1, freq, time]` single-channel image.
    Image,
    /// `[time, freq]` frame sequence.
    Sequence,
    /// `freq * time` flat vector.
    Flat,
}

fn yes() -> bool {
    true
}
fn three() -> usize {
    3
}
fn one() -> usize {
    1
}

/// Declarative layer description as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default = "yes")]
        expandable: bool,
    },
    Conv2d {
        channels: usize,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        padding: usize,
        #[serde(default = "yes")]
        expandable: bool,
    },
    Gru {
        hidden: usize,
        #[serde(default = "yes")]
        expandable: bool,
    },
    Attention {
        heads: usize,
        head_dim: usize,
        #[serde(default)]
        ffn_dim: usize,
        #[serde(default)]
        scale_mode: ScaleMode,
        #[serde(default = "yes")]
        expandable: bool,
    },
}

impl LayerSpec {
    fn expandable(&self) -> bool {
        match self {
            LayerSpec::Dense { expandable, .. }
            | LayerSpec::Conv2d { expandable, .. }
            | LayerSpec::Gru { expandable, .. }
            | LayerSpec::Attention { expandable, .. } => *expandable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
}

/// Shape of the activation flowing between layers (batch axis omitted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Repr {
    Image { channels: usize, height: usize, width: usize },
    Seq { steps: usize, dim: usize },
    Flat { dim: usize },
}

impl Repr {
    /// Width seen by a dense consumer (images flatten, sequences mean-pool over time).
    pub fn flat_dim(&self) -> usize {
        match *self {
            Repr::Image {
                channels,
                height,
                width,
            } => channels * height * width,
            Repr::Seq { dim, .. } => dim,
            Repr::Flat { dim } => dim,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Repr::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            Repr::Seq { steps, dim } => vec![steps, dim],
            Repr::Flat { dim } => vec![dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    Gru(GruLayer),
    Attention(AttentionBlock),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Dense(l) => &l.name,
            Layer::Conv2d(l) => &l.name,
            Layer::Gru(l) => &l.name,
            Layer::Attention(l) => &l.name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Gru(_) => "gru",
            Layer::Attention(_) => "attention",
        }
    }

    /// Neuron count: output units, filters, hidden units, or per-head dimension.
    pub fn width(&self) -> usize {
        match self {
            Layer::Dense(l) => l.out_dim,
            Layer::Conv2d(l) => l.out_channels,
            Layer::Gru(l) => l.hidden_dim,
            Layer::Attention(l) => l.head_dim,
        }
    }

    pub(crate) fn set_width(&mut self, w: usize) {
        match self {
            Layer::Dense(l) => l.out_dim = w,
            Layer::Conv2d(l) => l.out_channels = w,
            Layer::Gru(l) => l.hidden_dim = w,
            Layer::Attention(l) => l.head_dim = w,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Layer::Dense(l) => l.param_ids(),
            Layer::Conv2d(l) => l.param_ids(),
            Layer::Gru(l) => l.param_ids(),
            Layer::Attention(l) => l.param_ids(),
        }
    }

    /// Parameters whose shape follows this layer's width. For attention this is
    /// the Q/K/V/O projections; the feed-forward sublayer is width-independent.
    pub fn width_param_ids(&self) -> Vec<ParamId> {
        match self {
            Layer::Attention(l) => l.projection_ids(),
            other => other.param_ids(),
        }
    }
}

/// Sequential classifier: layers followed by a dense head producing 2 logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    pub input: Repr,
    pub layers: Vec<Layer>,
    pub expandable: Vec<bool>,
    pub head: DenseLayer,
    #[serde(default)]
    pub adapters: Vec<LoraAdapter>,
}

/// Node handles of a built model graph.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub input: NodeId,
    pub logits: NodeId,
    /// Output (post-activation) node of every layer.
    pub layer_outputs: Vec<NodeId>,
    pub targets: Option<NodeId>,
    pub loss: Option<NodeId>,
}

pub const NUM_CLASSES: usize = 2;

impl ModelGraph {
    /// Resolves a spec against a `[freq_bins, time_frames]` feature shape.
    pub fn from_spec(spec: &ModelSpec, freq_bins: usize, time_frames: usize) -> Result<ModelGraph> {
        if spec.layers.is_empty() {
            return Err(Error::Config {
                key: "model.layers".into(),
                msg: "at least one layer is required".into(),
            });
        }
        let input = match spec.input {
            InputSpec::Image => Repr::Image {
                channels: 1,
                height: freq_bins,
                width: time_frames,
            },
            InputSpec::Sequence => Repr::Seq {
                steps: time_frames,
                dim: freq_bins,
            },
            InputSpec::Flat => Repr::Flat {
                dim: freq_bins * time_frames,
            },
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut repr = input;
        for (i, ls) in spec.layers.iter().enumerate() {
            let name = format!("l{i}");
            let layer = match *ls {
                LayerSpec::Dense { units, .. } => Layer::Dense(DenseLayer::new(name, repr.flat_dim(), units, true)),
                LayerSpec::Conv2d {
                    channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let Repr::Image {
                        channels: c,
                        height,
                        width,
                    } = repr
                    else {
                        return Err(layer_err(i, "conv2d needs an image input (preceded only by conv layers)"));
                    };
                    let l = Conv2dLayer {
                        name,
                        in_channels: c,
                        out_channels: channels,
                        kernel_h: kernel,
                        kernel_w: kernel,
                        stride,
                        padding,
                        in_h: height,
                        in_w: width,
                        relu: true,
                    };
                    l.validate().map_err(|e| layer_err(i, &e.to_string()))?;
                    Layer::Conv2d(l)
                }
                LayerSpec::Gru { hidden, .. } => {
                    let Repr::Seq { dim, .. } = repr else {
                        return Err(layer_err(i, "gru needs a sequence input"));
                    };
                    Layer::Gru(GruLayer::new(name, dim, hidden))
                }
                LayerSpec::Attention {
                    heads,
                    head_dim,
                    ffn_dim,
                    scale_mode,
                    ..
                } => {
                    let Repr::Seq { dim, .. } = repr else {
                        return Err(layer_err(i, "attention needs a sequence input"));
                    };
                    let mut b = AttentionBlock::new(name, dim, heads, head_dim, ffn_dim);
                    b.scale_mode = scale_mode;
                    Layer::Attention(b)
                }
            };
            if layer.width() == 0 {
                return Err(layer_err(i, "width must be positive"));
            }
            repr = output_repr(&layer, repr);
            layers.push(layer);
        }
        let head = DenseLayer::new("head", repr.flat_dim(), NUM_CLASSES, false);
        Ok(ModelGraph {
            name: spec.name.clone(),
            input,
            expandable: spec.layers.iter().map(LayerSpec::expandable).collect(),
            layers,
            head,
            adapters: Vec::new(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn expandable_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.expandable[i]).collect()
    }

    pub fn is_expandable(&self, i: usize) -> bool {
        self.expandable.get(i).copied().unwrap_or(false)
    }

    /// Re-derives every layer's input dimensions from the input shape and the
    /// layers' widths. Called after any width change.
    pub fn propagate_dims(&mut self) -> Result<()> {
        let mut repr = self.input;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match (layer as &mut Layer, repr) {
                (Layer::Dense(l), r) => l.in_dim = r.flat_dim(),
                (
                    Layer::Conv2d(l),
                    Repr::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    l.in_channels = channels;
                    l.in_h = height;
                    l.in_w = width;
                }
                (Layer::Gru(l), Repr::Seq { dim, .. }) => l.input_dim = dim,
                (Layer::Attention(l), Repr::Seq { dim, .. }) => {
                    if l.model_dim != dim {
                        return Err(layer_err(i, "attention model_dim cannot change"));
                    }
                }
                _ => return Err(layer_err(i, "incompatible input representation")),
            }
            repr = output_repr(layer, repr);
        }
        self.head.in_dim = repr.flat_dim();
        Ok(())
    }

    /// Representation entering layer `i` (or the head when `i == num_layers`).
    pub fn repr_before(&self, i: usize) -> Repr {
        let mut repr = self.input;
        for layer in &self.layers[..i] {
            repr = output_repr(layer, repr);
        }
        repr
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(self.input.dims());
        s
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => l.init(&mut store, rng),
                Layer::Conv2d(l) => l.init(&mut store, rng),
                Layer::Gru(l) => l.init(&mut store, rng),
                Layer::Attention(l) => l.init(&mut store, rng),
            }
        }
        self.head.init(&mut store, rng);
        store
    }

    /// Every parameter id the model references (layers, head, adapters).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(Layer::param_ids).collect();
        ids.extend(self.head.param_ids());
        for a in &self.adapters {
            ids.push(a.a_id());
            ids.push(a.b_id());
        }
        ids
    }

    /// Builds the inference graph for a batch of `batch` samples.
    pub fn build(&self, graph: &mut Graph, batch: usize) -> ModelNodes {
        let input = graph.input(&self.input_shape(batch));
        let mut ctx = BuildCtx::new(graph, &self.adapters);
        let mut x = input;
        let mut repr = self.input;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = match layer {
                Layer::Dense(l) => {
                    let flat = to_flat(&mut ctx, x, repr);
                    l.build(&mut ctx, flat)
                }
                Layer::Conv2d(l) => l.build(&mut ctx, x),
                Layer::Gru(l) => {
                    let Repr::Seq { steps, .. } = repr else { unreachable!("validated at construction") };
                    *l.build(&mut ctx, x, batch, steps).last().unwrap()
                }
                Layer::Attention(l) => l.build(&mut ctx, x),
            };
            repr = output_repr(layer, repr);
            layer_outputs.push(x);
        }
        let flat = to_flat(&mut ctx, x, repr);
        let logits = self.head.build(&mut ctx, flat);
        ModelNodes {
            input,
            logits,
            layer_outputs,
            targets: None,
            loss: None,
        }
    }

    /// Graph with a mean cross-entropy loss output. Inputs: features, then targets.
    pub fn build_loss_graph(&self, batch: usize) -> (Graph, ModelNodes) {
        let mut g = Graph::new();
        let mut nodes = self.build(&mut g, batch);
        let targets = g.input(&[batch]);
        let loss = g.cross_entropy(nodes.logits, targets);
        g.set_output(loss);
        nodes.targets = Some(targets);
        nodes.loss = Some(loss);
        (g, nodes)
    }

    pub fn build_logits_graph(&self, batch: usize) -> (Graph, ModelNodes) {
        let mut g = Graph::new();
        let nodes = self.build(&mut g, batch);
        g.set_output(nodes.logits);
        (g, nodes)
    }
}

fn to_flat(ctx: &mut BuildCtx, x: NodeId, repr: Repr) -> NodeId {
    match repr {
        Repr::Image { .. } => ctx.graph.flatten(x),
        Repr::Seq { .. } => ctx.graph.mean_time(x),
        Repr::Flat { .. } => x,
    }
}

fn output_repr(layer: &Layer, input: Repr) -> Repr {
    match layer {
        Layer::Dense(l) => Repr::Flat { dim: l.out_dim },
        Layer::Conv2d(l) => Repr::Image {
            channels: l.out_channels,
            height: l.out_h(),
            width: l.out_w(),
        },
        Layer::Gru(l) => Repr::Flat { dim: l.hidden_dim },
        Layer::Attention(_) => input,
    }
}

fn layer_err(i: usize, msg: &str) -> Error {
    Error::Config {
        key: format!("model.layers[{i}]"),
        msg: msg.to_string(),
    }
}

/// Logits `[B, 2]` for a batch shaped `[B, ...input dims]`.
pub fn model_forward(model: &ModelGraph, params: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    let expect = model.input_shape(batch.shape()[0]);
    if batch.shape() != expect.as_slice() {
        return Err(Error::invalid(format!(
            "model `{}` expects batch shape {:?}, got {:?}",
            model.name,
            expect,
            batch.shape()
        )));
    }
    let (mut g, _) = model.build_logits_graph(batch.shape()[0]);
    g.forward(std::slice::from_ref(batch), params)
}
