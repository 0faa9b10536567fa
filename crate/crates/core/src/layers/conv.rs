use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{he_sigma, init_normal, run_single, BuildCtx};
use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// 2-D cross-correlation with ReLU. Expansion adds output channels (filters);
/// the spatial kernel never changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2dLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn yes() -> bool {
    true
}

impl Conv2dLayer {
    pub fn weight_id(&self) -> ParamId {
        format!("{}.weight", self.name)
    }

    pub fn bias_id(&self) -> ParamId {
        format!("{}.bias", self.name)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight_id(), self.bias_id()]
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }

    pub fn weight_sigma(&self) -> f64 {
        he_sigma(self.fan_in())
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.stride == 0
            || self.in_h + 2 * self.padding < self.kernel_h
            || self.in_w + 2 * self.padding < self.kernel_w
        {
            return Err(Error::invalid(format!(
                "conv `{}`: kernel {}x{} does not fit input {}x{} with padding {} / stride {}",
                self.name, self.kernel_h, self.kernel_w, self.in_h, self.in_w, self.padding, self.stride
            )));
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        init_normal(store, self.weight_id(), &self.weight_shape(), self.weight_sigma(), rng);
        store.insert(self.bias_id(), Tensor::zeros(&[self.out_channels]), true);
    }

    pub fn build(&self, ctx: &mut BuildCtx, x: NodeId) -> NodeId {
        let w = ctx.weight(&self.weight_id());
        let b = ctx.param(&self.bias_id());
        let y = ctx.graph.conv2d(x, w, b, self.stride, self.padding);
        let y = if self.relu { ctx.graph.relu(y) } else { y };
        ctx.graph.label(y, self.name.clone())
    }
}

/// Runs the layer on `x: [B, in_channels, in_h, in_w]`.
pub fn conv2d_forward(layer: &Conv2dLayer, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 4 || x.shape()[1] != layer.in_channels {
        return Err(Error::invalid(format!(
            "conv `{}` expects [B, {}, H, W], got {:?}",
            layer.name,
            layer.in_channels,
            x.shape()
        )));
    }
    run_single(params, x, |ctx, input| Ok(layer.build(ctx, input)))
}
