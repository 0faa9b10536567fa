//! Deterministic synthetic bona fide / spoof features.
//!
//! Bona fide examples are smoothed harmonic-band energy patterns with a slow
//! pitch glide and amplitude envelope, plus Gaussian noise. Spoof examples come
//! from the same generator with an added artifact scaled by `artifact_strength`:
//! a shared random envelope across the high-frequency band and a frame-periodic
//! ripple. Every random draw happens for both classes, so strength 0 makes the
//! classes identically distributed.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Repr;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BonaFide,
    Spoof,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::BonaFide => 0,
            Label::Spoof => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// `[freq_bins, time_frames]`
    pub features: Tensor,
    pub label: Label,
}

fn d_train() -> usize {
    2000
}
fn d_eval() -> usize {
    500
}
fn d_freq() -> usize {
    16
}
fn d_time() -> usize {
    40
}
fn d_strength() -> f64 {
    0.5
}
fn d_noise() -> f64 {
    0.5
}
fn d_spoof() -> f64 {
    0.5
}
fn d_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "d_train")]
    pub n_train: usize,
    #[serde(default = "d_eval")]
    pub n_dev: usize,
    #[serde(default = "d_eval")]
    pub n_test: usize,
    #[serde(default = "d_freq")]
    pub freq_bins: usize,
    #[serde(default = "d_time")]
    pub time_frames: usize,
    /// δ in [0, 1].
    #[serde(default = "d_strength")]
    pub artifact_strength: f64,
    #[serde(default = "d_noise")]
    pub noise_level: f64,
    /// Fraction of spoof examples in every split.
    #[serde(default = "d_spoof")]
    pub spoof_fraction: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: d_train(),
            n_dev: d_eval(),
            n_test: d_eval(),
            freq_bins: d_freq(),
            time_frames: d_time(),
            artifact_strength: d_strength(),
            noise_level: d_noise(),
            spoof_fraction: d_spoof(),
            seed: d_seed(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("data.{key}"),
                msg: msg.to_string(),
            })
        };
        for (key, n) in [("n_train", self.n_train), ("n_dev", self.n_dev), ("n_test", self.n_test)] {
            if n == 0 {
                return bad(key, "split must contain at least one example");
            }
        }
        if self.freq_bins == 0 || self.time_frames == 0 {
            return bad("freq_bins", "feature shape must be positive");
        }
        if !(0.0..=1.0).contains(&self.artifact_strength) {
            return bad("artifact_strength", "must lie in [0, 1]");
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return bad("noise_level", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.spoof_fraction) {
            return bad("spoof_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Generates the three splits, each from its own seeded stream.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        train: generate_split(spec, spec.n_train, 1),
        dev: generate_split(spec, spec.n_dev, 2),
        test: generate_split(spec, spec.n_test, 3),
    })
}

fn generate_split(spec: &SynthSpec, n: usize, stream: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let n_spoof = (spec.spoof_fraction * n as f64).round() as usize;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_spoof { Label::Spoof } else { Label::BonaFide })
        .collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| LabeledExample {
            features: synth_features(spec, label, &mut rng),
            label,
        })
        .collect()
}

const HIGH_BAND_GAIN: f64 = 0.35;
const RIPPLE_GAIN: f64 = 0.12;

fn synth_features<R: Rng>(spec: &SynthSpec, label: Label, rng: &mut R) -> Tensor {
    let (nf, nt) = (spec.freq_bins, spec.time_frames);
    let fmax = nf as f64;
    let f0 = rng.random_range(1.5..(fmax / 4.0).max(2.0));
    let glide = rng.random_range(-0.15..0.15);
    let width = rng.random_range(0.6..1.2);
    let env_period = rng.random_range(10.0..30.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let harmonics = (fmax / f0).ceil() as usize;
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| rng.random_range(0.6..1.0) / k as f64)
        .collect();
    // artifact draws are made for both classes
    let hb_level: f64 = rng.random_range(0.5..1.0);
    let mut hb_env: Vec<f64> = (0..nt).map(|_| StandardNormal.sample(rng)).collect();
    smooth(&mut hb_env);
    let strength = match label {
        Label::Spoof => spec.artifact_strength,
        Label::BonaFide => 0.0,
    };
    let high_start = (3 * nf) / 4;
    let mut values = vec![0.0; nf * nt];
    for t in 0..nt {
        let tf = t as f64;
        let env = 0.6 + 0.4 * (2.0 * PI * tf / env_period + env_phase).sin();
        let pitch = f0 * (1.0 + glide * (tf / nt as f64 - 0.5));
        let ripple = RIPPLE_GAIN * (PI * tf).cos();
        let band = HIGH_BAND_GAIN * hb_level * (1.0 + 0.5 * hb_env[t]);
        for f in 0..nf {
            let ff = f as f64;
            let mut e = 0.0;
            for (k, a) in amps.iter().enumerate() {
                let c = (k + 1) as f64 * pitch;
                e += a * (-(ff - c).powi(2) / (2.0 * width * width)).exp();
            }
            let mut artifact = ripple;
            if f >= high_start {
                artifact += band;
            }
            let noise: f64 = StandardNormal.sample(rng);
            values[f * nt + t] = env * e + strength * artifact + spec.noise_level * noise;
        }
    }
    Tensor::from_parts(vec![nf, nt], values)
}

/// 3-tap moving average, in place.
fn smooth(v: &mut [f64]) {
    if v.len() < 3 {
        return;
    }
    let src = v.to_vec();
    for i in 0..v.len() {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(v.len() - 1);
        v[i] = src[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
    }
}

/// Time-major frame sequence `[time_frames, freq_bins]` of a 2-D example.
pub fn as_sequence(example: &LabeledExample) -> Tensor {
    example.features.transpose2()
}

/// Stacks `examples[idx]` into a model input batch plus a class-index target vector.
pub fn batch_tensors(examples: &[LabeledExample], idx: &[usize], input: Repr) -> (Tensor, Tensor) {
    let per = examples[idx[0]].features.len();
    let mut values = Vec::with_capacity(idx.len() * per);
    let mut targets = Vec::with_capacity(idx.len());
    for &i in idx {
        let ex = &examples[i];
        match input {
            Repr::Seq { .. } => values.extend_from_slice(as_sequence(ex).values()),
            _ => values.extend_from_slice(ex.features.values()),
        }
        targets.push(ex.label.class_index() as f64);
    }
    let mut shape = vec![idx.len()];
    shape.extend(input.dims());
    (Tensor::from_parts(shape, values), Tensor::from_vec(targets))
}

/// Writes all splits into one tensor container: `{split}.features` `[N, F, T]`
/// and `{split}.labels` `[N]` (0 = bona fide, 1 = spoof).
pub fn dump_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut store = ParamStore::new();
    for (name, split) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        let idx: Vec<usize> = (0..split.len()).collect();
        let shape = split[0].features.shape().to_vec();
        let (x, y) = batch_tensors(
            split,
            &idx,
            Repr::Image {
                channels: 1,
                height: shape[0],
                width: shape[1],
            },
        );
        let x = x.reshape(vec![split.len(), shape[0], shape[1]])?;
        store.insert(format!("{name}.features"), x, false);
        store.insert(format!("{name}.labels"), y, false);
    }
    crate::checkpoint::save_store(path, &store)
}
