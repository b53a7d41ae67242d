//! Seeded finite-difference checks of every differentiable primitive and of
//! the composed network blocks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    attention_block_forward, conv_block_forward, init_params, se_block_forward, Forward, Mode,
    ModelConfig, ModelParams,
};
use crate::preprocess::Mask;
use crate::seed;
use crate::tensor::{BnMode, GradCheck, Tensor, Var};
use crate::training::bce_loss;

/// Checked operations in suite order.
pub const OPS: &[&str] = &[
    "conv2d",
    "max_pool2x2",
    "upsample2x",
    "batch_norm",
    "global_avg_pool",
    "dense",
    "relu",
    "sigmoid",
    "concat_channels",
    "add",
    "mul",
    "bce",
    "conv_block",
    "se_block",
    "attention_block",
    "model",
];

pub const DEFAULT_SEEDS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub tolerance: f64,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance && self.skipped * 20 <= self.checked + self.skipped
    }
}

/// Relative-error bound per op: `1e-6` for piecewise-linear ops and the
/// loss, `1e-5` for activations, `1e-4` for batch norm and composed blocks.
pub fn tolerance(op: &str) -> Option<f64> {
    Some(match op {
        "conv2d" | "max_pool2x2" | "upsample2x" | "global_avg_pool" | "dense" | "concat_channels"
        | "add" | "mul" | "bce" => 1e-6,
        "relu" | "sigmoid" => 1e-5,
        "batch_norm" | "conv_block" | "se_block" | "attention_block" | "model" => 1e-4,
        _ => return None,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Uniform in `±[0.05, 1]`, away from relu kinks.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches")
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let b = 1.0 / (shape[1..].iter().product::<usize>() as f64).sqrt();
    uniform(rng, shape, -b, b)
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen::<bool>())
}

/// Parameters under arbitrary names for checking a single block.
fn block_params(weights: Vec<(&str, Tensor<f64>)>) -> ModelParams<f64> {
    ModelParams {
        config: ModelConfig::default(),
        weights: weights.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        buffers: BTreeMap::new(),
    }
}

fn check_block(
    gc: &GradCheck,
    params: &ModelParams<f64>,
    inputs: Vec<Tensor<f64>>,
    extra: usize,
    build: impl Fn(&mut Forward<'_, '_, f64>, &[Var]) -> Result<Var>,
) -> Result<crate::tensor::GradCheckReport> {
    // Inputs are the `extra` activations followed by every named parameter.
    let names: Vec<String> = params.weights.keys().cloned().collect();
    let mut all = inputs;
    all.extend(params.weights.values().cloned());
    gc.run(&all, |g, v| {
        let mut fwd = Forward::new(g, params, Mode::Train);
        for (name, &var) in names.iter().zip(&v[extra..]) {
            fwd.bind(name, var);
        }
        build(&mut fwd, &v[..extra])
    })
}

fn run_one(op: &str, s: u64) -> Result<crate::tensor::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(0x6772_6164, op, s));
    let gc = GradCheck {
        epsilon: 1e-5,
        max_elements: None,
        seed: s,
    };
    match op {
        "conv2d" => {
            let stride = 1 + (s % 2) as usize;
            let ins = vec![
                uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0),
                uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[3], -1.0, 1.0),
            ];
            gc.run(&ins, |g, v| g.conv2d(v[0], v[1], v[2], stride, 1))
        }
        "max_pool2x2" => gc.run(&[uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0)], |g, v| g.max_pool2x2(v[0])),
        "upsample2x" => gc.run(&[uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0)], |g, v| g.upsample2x(v[0])),
        "batch_norm" => {
            let ins = vec![
                uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[2], 0.5, 1.5),
                uniform(&mut rng, &[2], -0.5, 0.5),
            ];
            gc.run(&ins, |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, BnMode::Train)?.0))
        }
        "global_avg_pool" => {
            gc.run(&[uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)], |g, v| g.global_avg_pool(v[0]))
        }
        "dense" => {
            let ins = vec![
                uniform(&mut rng, &[3, 4], -1.0, 1.0),
                uniform(&mut rng, &[5, 4], -1.0, 1.0),
                uniform(&mut rng, &[5], -1.0, 1.0),
            ];
            gc.run(&ins, |g, v| g.dense(v[0], v[1], v[2]))
        }
        "relu" => gc.run(&[signed_away(&mut rng, &[2, 3, 4, 4])], |g, v| g.relu(v[0])),
        "sigmoid" => gc.run(&[uniform(&mut rng, &[2, 3, 4, 4], -4.0, 4.0)], |g, v| g.sigmoid(v[0])),
        "concat_channels" => {
            let ins = vec![
                uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0),
            ];
            gc.run(&ins, |g, v| g.concat_channels(v[0], v[1]))
        }
        "add" | "mul" => {
            let rhs = if s.is_multiple_of(2) { [2, 3, 1, 1] } else { [2, 3, 3, 3] };
            let ins = vec![
                uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &rhs, -1.0, 1.0),
            ];
            if op == "add" {
                gc.run(&ins, |g, v| g.add(v[0], v[1]))
            } else {
                gc.run(&ins, |g, v| g.mul(v[0], v[1]))
            }
        }
        "bce" => {
            let masks = vec![random_mask(&mut rng, 3, 3), random_mask(&mut rng, 3, 3)];
            let p = uniform(&mut rng, &[2, 1, 3, 3], 0.05, 0.95);
            gc.run(&[p], |g, v| bce_loss(g, v[0], &masks))
        }
        "conv_block" => {
            let (cin, c) = (3, 4);
            let params = block_params(vec![
                ("b.conv1.w", fan_in_uniform(&mut rng, &[c, cin, 3, 3])),
                ("b.conv2.w", fan_in_uniform(&mut rng, &[c, c, 3, 3])),
                ("b.bn1.gamma", uniform(&mut rng, &[c], 0.5, 1.5)),
                ("b.bn1.beta", uniform(&mut rng, &[c], -0.5, 0.5)),
                ("b.bn2.gamma", uniform(&mut rng, &[c], 0.5, 1.5)),
                ("b.bn2.beta", uniform(&mut rng, &[c], -0.5, 0.5)),
                ("b.proj.w", fan_in_uniform(&mut rng, &[c, cin, 1, 1])),
                ("b.proj.b", uniform(&mut rng, &[c], -0.5, 0.5)),
            ]);
            let x = uniform(&mut rng, &[2, cin, 5, 5], -1.0, 1.0);
            check_block(&gc, &params, vec![x], 1, |f, v| conv_block_forward(f, "b", v[0]))
        }
        "se_block" => {
            let (c, hid) = (4, 2);
            let params = block_params(vec![
                ("se.bn.gamma", uniform(&mut rng, &[c], 0.5, 1.5)),
                ("se.bn.beta", uniform(&mut rng, &[c], -0.5, 0.5)),
                ("se.fc1.w", fan_in_uniform(&mut rng, &[hid, c])),
                ("se.fc1.b", uniform(&mut rng, &[hid], -0.5, 0.5)),
                ("se.fc2.w", fan_in_uniform(&mut rng, &[c, hid])),
                ("se.fc2.b", uniform(&mut rng, &[c], -0.5, 0.5)),
            ]);
            let x = uniform(&mut rng, &[3, c, 3, 3], -1.0, 1.0);
            check_block(&gc, &params, vec![x], 1, |f, v| se_block_forward(f, "se", v[0]))
        }
        "attention_block" => {
            let c = 3;
            let params = block_params(vec![
                ("att.w", fan_in_uniform(&mut rng, &[1, 2 * c, 1, 1])),
                ("att.b", uniform(&mut rng, &[1], -0.5, 0.5)),
            ]);
            let ins = vec![
                uniform(&mut rng, &[2, c, 4, 4], -1.0, 1.0),
                uniform(&mut rng, &[2, c, 4, 4], -1.0, 1.0),
                uniform(&mut rng, &[2, c, 1, 1], 0.05, 0.95),
            ];
            check_block(&gc, &params, ins, 3, |f, v| attention_block_forward(f, "att", v[0], v[1], v[2]))
        }
        "model" => model_check(s, 10),
        _ => Err(Error::param(format!("unknown gradcheck op {op:?}"))),
    }
}

/// Mean BCE of the tiny network (32 px, 2 levels, 4 base channels, train
/// mode) against `weights_per_seed` randomly chosen weights.
pub fn model_check(s: u64, weights_per_seed: usize) -> Result<crate::tensor::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(0x6d6f_6465, "model", s));
    let cfg = ModelConfig {
        seed: s,
        ..ModelConfig::tiny()
    };
    let mut params = init_params(&cfg)?.cast::<f64>();
    for (name, t) in params.weights.iter_mut() {
        if name.ends_with(".gamma") {
            *t = uniform(&mut rng, t.shape(), 0.5, 1.5);
        } else if name.ends_with(".beta") || name.ends_with(".b") {
            *t = uniform(&mut rng, t.shape(), -0.2, 0.2);
        }
    }
    let n = 2;
    let x = uniform(&mut rng, &[n, 3, cfg.input_size, cfg.input_size], 0.0, 1.0);
    let masks: Vec<Mask> = (0..n)
        .map(|_| random_mask(&mut rng, cfg.input_size, cfg.input_size))
        .collect();
    // Choose (tensor, element) pairs, then check each chosen tensor on its
    // chosen elements only.
    let names: Vec<String> = params.weights.keys().cloned().collect();
    let mut picks: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..weights_per_seed {
        *picks.entry(names[rng.gen_range(0..names.len())].clone()).or_default() += 1;
    }
    let mut report = crate::tensor::GradCheckReport::default();
    for (name, count) in picks {
        let t = params.weights[&name].clone();
        let gc = GradCheck {
            epsilon: 1e-5,
            max_elements: Some(count.min(t.len())),
            seed: seed::derive(s, &name, 1),
        };
        let r = gc.run(&[t], |g, v| {
            let xv = g.constant(x.clone());
            let mut fwd = Forward::new(g, &params, Mode::Train);
            fwd.bind(&name, v[0]);
            let out = fwd.network(xv, true)?;
            bce_loss(g, out, &masks)
        })?;
        report.inputs.extend(r.inputs);
    }
    Ok(report)
}

/// Check `op` on `seeds` seeded instances.
pub fn check_op(op: &str, seeds: usize) -> Result<OpCheck> {
    let tol = tolerance(op).ok_or_else(|| Error::param(format!("unknown gradcheck op {op:?}")))?;
    let mut out = OpCheck {
        op: op.to_string(),
        tolerance: tol,
        seeds,
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for s in 0..seeds as u64 {
        let r = run_one(op, s)?;
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error());
        out.checked += r.checked();
        out.skipped += r.skipped();
    }
    Ok(out)
}

pub fn run_suite(ops: &[&str], seeds: usize) -> Result<Vec<OpCheck>> {
    ops.iter().map(|op| check_op(op, seeds)).collect()
}
