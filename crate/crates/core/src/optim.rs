//! Masked SGD and Adam. Only elements allowed by a parameter's train mask move.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, TrainMask};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: default_lr(),
            batch_size: default_batch(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config {
                key: "optimizer.learning_rate".into(),
                msg: format!("must be positive, got {}", self.learning_rate),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "optimizer.batch_size".into(),
                msg: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: BTreeMap<ParamId, Moments>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Drops all optimizer state (moment estimates and step count).
    pub fn reset(&mut self) {
        self.moments.clear();
        self.steps = 0;
    }

    /// Applies one update. Returns the number of parameter elements updated.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<usize> {
        self.steps += 1;
        let lr = self.config.learning_rate;
        let t = self.steps as i32;
        let mut updated = 0;
        for (id, g) in grads {
            let Some(mask) = params.mask(id).cloned() else {
                continue;
            };
            let p = params.get_mut(id)?;
            if p.len() != g.len() {
                return Err(Error::invalid(format!("gradient for `{id}` has the wrong length")));
            }
            let gv = g.values();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (i, (w, gi)) in p.values_mut().iter_mut().zip(gv).enumerate() {
                        if mask.allows(i) {
                            *w -= lr * gi;
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let n = gv.len();
                    let st = self.moments.entry(id.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                    if st.m.len() != n {
                        *st = Moments {
                            m: vec![0.0; n],
                            v: vec![0.0; n],
                        };
                    }
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    let w = p.values_mut();
                    let mut upd = |i: usize| {
                        let gi = gv[i];
                        st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * gi;
                        st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * gi * gi;
                        let mhat = st.m[i] / c1;
                        let vhat = st.v[i] / c2;
                        w[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    };
                    match &mask {
                        TrainMask::All => (0..n).for_each(&mut upd),
                        TrainMask::Elements(bits) => {
                            for (i, &b) in bits.iter().enumerate() {
                                if b {
                                    upd(i);
                                }
                            }
                        }
                    }
                }
            }
            updated += mask.count(p_len(params, id));
        }
        Ok(updated)
    }
}

fn p_len(params: &ParamStore, id: &str) -> usize {
    params.get(id).map(|t| t.len()).unwrap_or(0)
}
