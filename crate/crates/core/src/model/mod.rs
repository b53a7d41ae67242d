//! Residual U-Net with squeeze-excitation and spatial attention on the skips.

mod forward;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

pub use forward::{
    attention_block_forward, conv_block_forward, model_forward, model_forward_no_attention,
    se_block_forward, Forward, Mode, BN_EPS,
};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub se_reduction: usize,
    /// Build the SE and attention blocks on the skips. Without them the
    /// decoder concatenates raw skips.
    pub attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 224,
            in_channels: 3,
            levels: 4,
            base_channels: 16,
            se_reduction: 4,
            attention: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale network: 64 px input, 3 levels, 8 base channels.
    pub fn small() -> Self {
        ModelConfig {
            input_size: 64,
            levels: 3,
            base_channels: 8,
            ..ModelConfig::default()
        }
    }

    /// Gradient-check scale: 32 px input, 2 levels, 4 base channels.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 32,
            levels: 2,
            base_channels: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::param(format!("levels {} must be in 1..=8", self.levels)));
        }
        let step = 1usize << self.levels;
        if self.input_size == 0 || !self.input_size.is_multiple_of(step) {
            return Err(Error::param(format!(
                "input_size {} must be a positive multiple of 2^levels = {step}",
                self.input_size
            )));
        }
        if self.in_channels != 3 {
            return Err(Error::param(format!(
                "in_channels must be 3 (RGB), got {}",
                self.in_channels
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::param("base_channels must be at least 1"));
        }
        if self.se_reduction == 0 || self.se_reduction > self.base_channels {
            return Err(Error::param(format!(
                "se_reduction {} must be in 1..=base_channels",
                self.se_reduction
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `i`; `levels` is the bottleneck.
    pub fn width(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn se_hidden(&self, c: usize) -> usize {
        (c / self.se_reduction).max(1)
    }

    /// Every trainable tensor with its shape, in name order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            out.insert(name, shape);
        };
        let block = |put: &mut dyn FnMut(String, Vec<usize>), p: &str, cin: usize, c: usize| {
            put(format!("{p}.conv1.w"), vec![c, cin, 3, 3]);
            put(format!("{p}.conv2.w"), vec![c, c, 3, 3]);
            for bn in ["bn1", "bn2"] {
                put(format!("{p}.{bn}.gamma"), vec![c]);
                put(format!("{p}.{bn}.beta"), vec![c]);
            }
            if cin != c {
                put(format!("{p}.proj.w"), vec![c, cin, 1, 1]);
                put(format!("{p}.proj.b"), vec![c]);
            }
        };
        let mut cin = self.in_channels;
        for i in 0..self.levels {
            block(&mut put, &format!("enc{i}"), cin, self.width(i));
            cin = self.width(i);
        }
        block(&mut put, "mid", cin, self.width(self.levels));
        for i in 0..self.levels {
            let c = self.width(i);
            let p = format!("dec{i}");
            put(format!("{p}.up.w"), vec![c, 2 * c, 3, 3]);
            put(format!("{p}.up.b"), vec![c]);
            if self.attention {
                let hid = self.se_hidden(c);
                put(format!("{p}.se.bn.gamma"), vec![c]);
                put(format!("{p}.se.bn.beta"), vec![c]);
                put(format!("{p}.se.fc1.w"), vec![hid, c]);
                put(format!("{p}.se.fc1.b"), vec![hid]);
                put(format!("{p}.se.fc2.w"), vec![c, hid]);
                put(format!("{p}.se.fc2.b"), vec![c]);
                put(format!("{p}.att.w"), vec![1, 2 * c, 1, 1]);
                put(format!("{p}.att.b"), vec![1]);
            }
            block(&mut put, &format!("{p}.block"), 2 * c, c);
        }
        put("head.w".into(), vec![1, self.base_channels, 1, 1]);
        put("head.b".into(), vec![1]);
        out
    }

    /// Batch-norm layer prefixes, each owning `.gamma`/`.beta` parameters and
    /// `.running_mean`/`.running_var` buffers.
    pub fn bn_layers(&self) -> Vec<String> {
        self.param_shapes()
            .keys()
            .filter_map(|k| k.strip_suffix(".gamma").map(str::to_string))
            .collect()
    }
}

/// Named weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub weights: BTreeMap<String, Tensor<T>>,
    /// `{bn}.running_mean` and `{bn}.running_var` per batch-norm layer.
    pub buffers: BTreeMap<String, Tensor<T>>,
}

/// Fan-in of a weight tensor: every dim but the first.
pub fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let mut weights = BTreeMap::new();
    for (name, shape) in cfg.param_shapes() {
        let t = if name.ends_with(".w") {
            let bound = 1.0 / (fan_in(&shape) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &name, 0));
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            Tensor::new(shape, data)?
        } else if name.ends_with(".gamma") {
            Tensor::ones(shape)
        } else {
            Tensor::zeros(shape)
        };
        weights.insert(name, t);
    }
    let mut buffers = BTreeMap::new();
    for bn in cfg.bn_layers() {
        let c = weights[&format!("{bn}.gamma")].len();
        buffers.insert(format!("{bn}.running_mean"), Tensor::zeros([c]));
        buffers.insert(format!("{bn}.running_var"), Tensor::ones([c]));
    }
    Ok(ModelParams {
        config: cfg.clone(),
        weights,
        buffers,
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::param(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::param(format!("missing buffer {name}")))
    }

    pub fn weight_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.weights
            .get_mut(name)
            .ok_or_else(|| Error::param(format!("missing parameter {name}")))
    }

    /// Check that names and shapes are exactly those implied by the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.param_shapes();
        if expected.len() != self.weights.len() {
            return Err(Error::param(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.weights.len()
            )));
        }
        for (name, shape) in &expected {
            let t = self.weight(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("params", t.shape(), shape));
            }
        }
        let bns = self.config.bn_layers();
        if self.buffers.len() != 2 * bns.len() {
            return Err(Error::param("unexpected batch-norm buffer set"));
        }
        for bn in bns {
            let c = expected[&format!("{bn}.gamma")][0];
            for suffix in ["running_mean", "running_var"] {
                let t = self.buffer(&format!("{bn}.{suffix}"))?;
                if t.shape() != [c] {
                    return Err(Error::shape("params", t.shape(), &[c]));
                }
            }
        }
        Ok(())
    }

    /// Fold batch statistics into the running averages:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running_stats(&mut self, stats: &[(String, crate::tensor::BatchStats<T>)], momentum: f64) -> Result<()> {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (bn, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{bn}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::param(format!("missing buffer {name}")))?;
                if buf.len() != batch.len() {
                    return Err(Error::shape("running stats", buf.shape(), &[batch.len()]));
                }
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }

    /// Every weight set to zero (buffers untouched).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for t in out.weights.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }

    /// Bitwise equality of every tensor, stricter than `==` on NaN payloads.
    pub fn bit_identical(&self, other: &Self) -> bool {
        fn same<T: Scalar>(a: &BTreeMap<String, Tensor<T>>, b: &BTreeMap<String, Tensor<T>>) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|((ka, ta), (kb, tb))| {
                    ka == kb
                        && ta.shape() == tb.shape()
                        && ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
                })
        }
        self.config == other.config && same(&self.weights, &other.weights) && same(&self.buffers, &other.buffers)
    }
}
