use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{affine, he_sigma, init_normal, lecun_sigma, run_single, BuildCtx};
use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected layer `y = W·x + b` with `W: [out_dim, in_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub relu: bool,
}

impl DenseLayer {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, relu: bool) -> Self {
        DenseLayer {
            name: name.into(),
            in_dim,
            out_dim,
            relu,
        }
    }

    pub fn weight_id(&self) -> ParamId {
        format!("{}.weight", self.name)
    }

    pub fn bias_id(&self) -> ParamId {
        format!("{}.bias", self.name)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight_id(), self.bias_id()]
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }

    pub fn weight_sigma(&self) -> f64 {
        if self.relu {
            he_sigma(self.in_dim)
        } else {
            lecun_sigma(self.in_dim)
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        init_normal(store, self.weight_id(), &[self.out_dim, self.in_dim], self.weight_sigma(), rng);
        store.insert(self.bias_id(), Tensor::zeros(&[self.out_dim]), true);
    }

    pub fn build(&self, ctx: &mut BuildCtx, x: NodeId) -> NodeId {
        let y = affine(ctx, x, &self.weight_id(), &self.bias_id(), self.relu);
        ctx.graph.label(y, self.name.clone())
    }
}

/// `y = W·x + b` (plus ReLU when the layer has it) for `x: [..., in_dim]`.
pub fn dense_forward(layer: &DenseLayer, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    if x.shape().last() != Some(&layer.in_dim) {
        return Err(Error::invalid(format!(
            "dense `{}` expects last dim {}, got shape {:?}",
            layer.name,
            layer.in_dim,
            x.shape()
        )));
    }
    run_single(params, x, |ctx, input| Ok(layer.build(ctx, input)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn store_with(layer: &DenseLayer, w: Vec<f64>, b: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(layer.weight_id(), Tensor::new(vec![layer.out_dim, layer.in_dim], w).unwrap(), true);
        p.insert(layer.bias_id(), Tensor::new(vec![layer.out_dim], b).unwrap(), true);
        p
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let layer = DenseLayer::new("d", 3, 3, false);
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let p = store_with(&layer, eye, vec![0.0; 3]);
        let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(dense_forward(&layer, &p, &x).unwrap(), x);
    }

    #[test]
    fn zero_weight_yields_bias() {
        let layer = DenseLayer::new("d", 2, 3, false);
        let p = store_with(&layer, vec![0.0; 6], vec![0.5, -1.0, 2.0]);
        let x = Tensor::new(vec![1, 2], vec![7.0, 9.0]).unwrap();
        assert_eq!(dense_forward(&layer, &p, &x).unwrap().values(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let layer = DenseLayer::new("d", 5, 4, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamStore::new();
        layer.init(&mut p, &mut rng);
        p.insert(layer.bias_id(), Tensor::randn(&[4], 1.0, &mut rng), true);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let y = dense_forward(&layer, &p, &x).unwrap();
        let w = p.get(&layer.weight_id()).unwrap();
        let b = p.get(&layer.bias_id()).unwrap();
        for s in 0..3 {
            for o in 0..4 {
                let mut acc = b.at(&[o]);
                for i in 0..5 {
                    acc += w.at(&[o, i]) * x.at(&[s, i]);
                }
                assert!((y.at(&[s, o]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_input_dim() {
        let layer = DenseLayer::new("d", 4, 2, false);
        let p = store_with(&layer, vec![0.0; 8], vec![0.0; 2]);
        let x = Tensor::zeros(&[1, 3]);
        assert!(dense_forward(&layer, &p, &x).is_err());
    }

    #[test]
    fn param_count_matches_shape_arithmetic() {
        assert_eq!(DenseLayer::new("d", 4, 8, true).param_count(), 40);
    }
}
