use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, Graph, Scalar, Tensor, Var};

use super::ModelParams;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every batch norm; they are collected for the
    /// running averages.
    Train,
    /// Running statistics in every batch norm.
    Eval,
}

/// One forward pass of the network recorded on a graph.
///
/// Parameters are bound to graph leaves on first use, as trainable leaves
/// when `trainable` is set and as constants otherwise. [`Forward::bind`]
/// substitutes a caller-made variable for a named parameter.
pub struct Forward<'g, 'p, T: Scalar> {
    graph: &'g mut Graph<T>,
    params: &'p ModelParams<T>,
    mode: Mode,
    trainable: bool,
    vars: BTreeMap<String, Var>,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'g, 'p, T: Scalar> Forward<'g, 'p, T> {
    pub fn new(graph: &'g mut Graph<T>, params: &'p ModelParams<T>, mode: Mode) -> Self {
        Forward {
            graph,
            params,
            mode,
            trainable: false,
            vars: BTreeMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn trainable(mut self, on: bool) -> Self {
        self.trainable = on;
        self
    }

    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn graph(&mut self) -> &mut Graph<T> {
        self.graph
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    /// Graph variable of parameter `name`.
    pub fn var(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.weight(name)?.clone();
        let v = self.graph.leaf(t, self.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Batch statistics recorded by train-mode batch norms, by layer prefix.
    pub fn into_stats(self) -> Vec<(String, BatchStats<T>)> {
        self.stats
    }

    /// Bound parameter variables and recorded batch statistics.
    #[allow(clippy::type_complexity)]
    pub fn into_parts(self) -> (BTreeMap<String, Var>, Vec<(String, BatchStats<T>)>) {
        (self.vars, self.stats)
    }

    fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: self.params.buffer(&format!("{prefix}.running_mean"))?,
                var: self.params.buffer(&format!("{prefix}.running_var"))?,
            },
        };
        let (y, stats) = self.graph.batch_norm(x, gamma, beta, BN_EPS, mode)?;
        if let Some(s) = stats {
            self.stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    fn conv(&mut self, x: Var, prefix: &str, padding: usize, bias: bool) -> Result<Var> {
        let w = self.var(&format!("{prefix}.w"))?;
        let b = if bias {
            self.var(&format!("{prefix}.b"))?
        } else {
            let cout = self.graph.value(w).shape()[0];
            self.graph.constant(Tensor::zeros([cout]))
        };
        self.graph.conv2d(x, w, b, 1, padding)
    }

    /// Encoder, bottleneck, decoder and sigmoid head on an `N×3×S×S` input.
    pub fn network(&mut self, input: Var, attention: bool) -> Result<Var> {
        let cfg = self.params.config.clone();
        let (_, c, h, w) = self.graph.value(input).dims4()?;
        let s = cfg.input_size;
        if (c, h, w) != (cfg.in_channels, s, s) {
            let n = self.graph.value(input).shape()[0];
            return Err(Error::shape(
                "model input",
                self.graph.value(input).shape(),
                &[n, cfg.in_channels, s, s],
            ));
        }
        if attention && !cfg.attention {
            return Err(Error::param(
                "parameters were built without attention blocks",
            ));
        }
        let mut skips = Vec::with_capacity(cfg.levels);
        let mut x = input;
        for i in 0..cfg.levels {
            let f = conv_block_forward(self, &format!("enc{i}"), x)?;
            skips.push(f);
            x = self.graph.max_pool2x2(f)?;
        }
        x = conv_block_forward(self, "mid", x)?;
        for i in (0..cfg.levels).rev() {
            let p = format!("dec{i}");
            let u = self.graph.upsample2x(x)?;
            let d = self.conv(u, &format!("{p}.up"), 1, true)?;
            let skip = skips[i];
            let cat = if attention {
                let se = se_block_forward(self, &format!("{p}.se"), d)?;
                let att = attention_block_forward(self, &format!("{p}.att"), skip, d, se)?;
                let dd = self.graph.mul(d, se)?;
                self.graph.concat_channels(dd, att)?
            } else {
                self.graph.concat_channels(d, skip)?
            };
            x = conv_block_forward(self, &format!("{p}.block"), cat)?;
        }
        let logits = self.conv(x, "head", 0, true)?;
        self.graph.sigmoid(logits)
    }
}

/// Residual block: `relu(BN(conv(relu(BN(conv(x))))) + skip)` with a 1×1
/// projection on the skip when the width changes.
pub fn conv_block_forward<T: Scalar>(fwd: &mut Forward<'_, '_, T>, prefix: &str, x: Var) -> Result<Var> {
    let a = fwd.conv(x, &format!("{prefix}.conv1"), 1, false)?;
    let a = fwd.batch_norm(&format!("{prefix}.bn1"), a)?;
    let a = fwd.graph.relu(a)?;
    let a = fwd.conv(a, &format!("{prefix}.conv2"), 1, false)?;
    let a = fwd.batch_norm(&format!("{prefix}.bn2"), a)?;
    let proj = format!("{prefix}.proj.w");
    let skip = if fwd.params.weights.contains_key(&proj) || fwd.vars.contains_key(&proj) {
        fwd.conv(x, &format!("{prefix}.proj"), 0, true)?
    } else {
        x
    };
    let sum = fwd.graph.add(a, skip)?;
    fwd.graph.relu(sum)
}

/// Channel weights `N×C×1×1` in (0, 1):
/// GAP → BN → dense → relu → dense → sigmoid.
pub fn se_block_forward<T: Scalar>(fwd: &mut Forward<'_, '_, T>, prefix: &str, x: Var) -> Result<Var> {
    let (n, c, _, _) = fwd.graph.value(x).dims4()?;
    let pooled = fwd.graph.global_avg_pool(x)?;
    let flat = fwd.graph.reshape(pooled, [n, c])?;
    let z = fwd.batch_norm(&format!("{prefix}.bn"), flat)?;
    let w1 = fwd.var(&format!("{prefix}.fc1.w"))?;
    let b1 = fwd.var(&format!("{prefix}.fc1.b"))?;
    let z = fwd.graph.dense(z, w1, b1)?;
    let z = fwd.graph.relu(z)?;
    let w2 = fwd.var(&format!("{prefix}.fc2.w"))?;
    let b2 = fwd.var(&format!("{prefix}.fc2.b"))?;
    let z = fwd.graph.dense(z, w2, b2)?;
    let z = fwd.graph.sigmoid(z)?;
    fwd.graph.reshape(z, [n, c, 1, 1])
}

/// Spatial gate on the skip: `skip ⊙ σ(conv1×1([gated ⊙ se, skip]))`.
pub fn attention_block_forward<T: Scalar>(
    fwd: &mut Forward<'_, '_, T>,
    prefix: &str,
    skip: Var,
    gated: Var,
    se_weights: Var,
) -> Result<Var> {
    let (ss, gs) = (fwd.graph.value(skip).shape(), fwd.graph.value(gated).shape());
    if ss != gs {
        return Err(Error::shape("attention_block", ss, gs));
    }
    let d = fwd.graph.mul(gated, se_weights)?;
    let cat = fwd.graph.concat_channels(d, skip)?;
    let a = fwd.conv(cat, prefix, 0, true)?;
    let a = fwd.graph.sigmoid(a)?;
    fwd.graph.mul(skip, a)
}

fn run<T: Scalar>(batch: &Tensor<T>, params: &ModelParams<T>, mode: Mode, attention: bool) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let mut fwd = Forward::new(&mut g, params, mode);
    let out = fwd.network(x, attention)?;
    Ok(g.value(out).clone())
}

/// Wound probabilities `N×1×S×S` for an `N×3×S×S` batch.
pub fn model_forward<T: Scalar>(batch: &Tensor<T>, params: &ModelParams<T>, mode: Mode) -> Result<Tensor<T>> {
    run(batch, params, mode, true)
}

/// As [`model_forward`] with the skips concatenated unmodified.
pub fn model_forward_no_attention<T: Scalar>(
    batch: &Tensor<T>,
    params: &ModelParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    run(batch, params, mode, false)
}
