//! Loss, optimization loop, dataset splitting, pretrain/fine-tune and
//! evaluation.

mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{binarize, confusion_counts, Confusion, MetricTriple};
use crate::model::{init_params, Forward, Mode, ModelConfig, ModelParams};
use crate::preprocess::Mask;
use crate::seed;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

/// Running-statistics momentum of every batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub binarize_threshold: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation DSC improvement.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            loss: LossKind::Bce,
            binarize_threshold: 0.5,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::param(format!(
                "binarize_threshold {} must lie in (0, 1)",
                self.binarize_threshold
            )));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::param("early_stop_patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Shuffle ids under `spec.seed`, then cut at `⌊train·n⌋` and
/// `⌊(train + val)·n⌋`.
pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let fr = [spec.train_frac, spec.val_frac, spec.test_frac];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("split fractions {fr:?} must be in [0, 1] and sum to 1")));
    }
    let n = ds.len();
    if n < 10 {
        return Err(Error::data(format!("need at least 10 samples to split, got {n}")));
    }
    let mut ids = ds.ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, "split", 0)));
    // The small slack keeps products such as 0.7·10 from flooring to 6.
    let cut = |f: f64| ((f * n as f64 + 1e-9).floor() as usize).min(n);
    let a = cut(spec.train_frac);
    let b = cut(spec.train_frac + spec.val_frac).max(a);
    Ok(Split {
        train: ds.subset(ids[..a].iter().copied())?,
        val: ds.subset(ids[a..b].iter().copied())?,
        test: ds.subset(ids[b..].iter().copied())?,
    })
}

/// Stack samples into an `N×3×H×W` input and an `N×1×H×W` target.
pub fn to_batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::data("empty batch"))?;
    let (h, w) = first.dims();
    let mut x = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut y = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.dims() != (h, w) {
            return Err(Error::data(format!("sample {} is {:?}, batch is {:?}", s.id, s.dims(), (h, w))));
        }
        x.extend(s.image.to_planar().into_iter().map(T::from_f64_lossy));
        y.extend(s.mask.data().iter().map(|&m| if m == 1 { T::one() } else { T::zero() }));
    }
    let n = samples.len();
    Ok((Tensor::new([n, 3, h, w], x)?, Tensor::new([n, 1, h, w], y)?))
}

/// Mean binary cross-entropy of `pred` against the masks, with predictions
/// clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[Mask]) -> Result<Var> {
    let shape = g.value(pred).shape().to_vec();
    let (h, w) = target.first().map(|m| (m.height(), m.width())).unwrap_or((0, 0));
    let expect = [target.len(), 1, h, w];
    if shape != expect || target.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::shape("bce_loss", &shape, &expect));
    }
    let t: Vec<T> = target
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| T::from_u8(v).unwrap()))
        .collect();
    g.bce(pred, &Tensor::new(shape, t)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Macro-averaged validation metrics; absent without a validation set.
    pub val: Option<MetricTriple>,
    pub wall_ms: f64,
    /// Digest of the epoch's shuffle seed and sample order.
    pub rng_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Eval-mode mean loss over the training set before the first step.
    pub initial_loss: Option<f64>,
    /// Eval-mode mean loss over the training set after the last step.
    pub final_loss: Option<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// SHA-256 over everything except wall-clock times.
    pub fn digest(&self) -> String {
        let mut h = self.clone();
        for e in &mut h.epochs {
            e.wall_ms = 0.0;
        }
        seed::digest_hex(serde_json::to_string(&h).expect("history serializes").as_bytes())
    }

    pub fn last_val(&self) -> Option<MetricTriple> {
        self.epochs.iter().rev().find_map(|e| e.val)
    }
}

fn check_sizes(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    let s = cfg.input_size;
    if let Some(bad) = ds.samples().iter().find(|x| x.dims() != (s, s)) {
        return Err(Error::data(format!(
            "sample {} is {:?}, model expects {s}x{s}",
            bad.id,
            bad.dims()
        )));
    }
    Ok(())
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    params: &mut ModelParams<f32>,
    opt: &mut Optimizer,
    batch: &[&Sample],
) -> Result<f64> {
    let (x, _) = to_batch::<f32>(batch)?;
    let masks: Vec<Mask> = batch.iter().map(|s| s.mask.clone()).collect();
    let attention = params.config.attention;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let snapshot = params.clone();
    let mut fwd = Forward::new(&mut g, &snapshot, Mode::Train).trainable(true);
    let pred = fwd.network(xv, attention)?;
    let (vars, stats) = fwd.into_parts();
    let loss = bce_loss(&mut g, pred, &masks)?;
    let loss_value = g.value(loss).data()[0] as f64;
    g.backward(loss)?;
    let grads: BTreeMap<String, Tensor<f32>> = vars
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t.clone())))
        .collect();
    opt.step(params, &grads)?;
    params.update_running_stats(&stats, BN_MOMENTUM)?;
    Ok(loss_value)
}

/// Mini-batch training with a per-epoch shuffle seeded by `(seed, epoch)`.
///
/// Batch norms run in train mode during updates and in eval mode for
/// validation. With early stopping the parameters of the last completed
/// epoch are returned.
pub fn fit(
    train: &Dataset,
    val: &Dataset,
    params: ModelParams<f32>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    cfg.validate()?;
    params.validate()?;
    check_sizes(train, &params.config)?;
    check_sizes(val, &params.config)?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((params, history));
    }
    if train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let mut params = params;
    history.initial_loss = Some(mean_loss(train, &params, cfg.batch_size)?);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let epoch_seed = seed::derive(cfg.seed, "epoch", epoch as u64);
        let mut order: Vec<&Sample> = train.samples().iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut digest_input = epoch_seed.to_le_bytes().to_vec();
        for s in &order {
            digest_input.extend(s.id.as_bytes());
            digest_input.push(0);
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            total += train_step(&mut params, &mut opt, batch)? * batch.len() as f64;
        }
        let val_metrics = if val.is_empty() {
            None
        } else {
            Some(evaluate_model(val, &params, cfg)?.macro_avg)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            val: val_metrics,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            rng_digest: seed::digest_hex(&digest_input),
        });
        if let (Some(patience), Some(m)) = (cfg.early_stop_patience, val_metrics) {
            if m.dsc > best {
                best = m.dsc;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    history.final_loss = Some(mean_loss(train, &params, cfg.batch_size)?);
    Ok((params, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub params: ModelParams<f32>,
    pub pretrain: TrainHistory,
    pub finetune: TrainHistory,
}

/// Fit on `source` from a fresh initialization, then continue on `target`
/// from those weights with every weight trainable. `target_val` drives the
/// fine-tuning validation rows.
pub fn pretrain_finetune(
    source: &Dataset,
    target: &Dataset,
    target_val: &Dataset,
    cfg_pre: &TrainConfig,
    cfg_fine: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<PretrainOutcome> {
    model_cfg.validate()?;
    for ds in [source, target, target_val] {
        if let Some(s) = ds.samples().first() {
            if s.dims() != (model_cfg.input_size, model_cfg.input_size) {
                return Err(Error::param(format!(
                    "model input {} does not match {}x{} samples",
                    model_cfg.input_size,
                    s.dims().0,
                    s.dims().1
                )));
            }
        }
    }
    let init = init_params(model_cfg)?;
    let (pre, pretrain) = fit(source, &Dataset::empty(), init, cfg_pre)?;
    let (params, finetune) = fit(target, target_val, pre, cfg_fine)?;
    Ok(PretrainOutcome {
        params,
        pretrain,
        finetune,
    })
}

/// Eval-mode probabilities for a batch of samples.
pub fn predict<T: Scalar>(params: &ModelParams<T>, samples: &[&Sample]) -> Result<Tensor<T>> {
    let (x, _) = to_batch::<T>(samples)?;
    if params.config.attention {
        crate::model::model_forward(&x, params, Mode::Eval)
    } else {
        crate::model::model_forward_no_attention(&x, params, Mode::Eval)
    }
}

/// Eval-mode mean BCE over a dataset.
pub fn mean_loss(ds: &Dataset, params: &ModelParams<f32>, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let samples: Vec<&Sample> = ds.samples().iter().collect();
    for batch in samples.chunks(batch_size.max(1)) {
        let prob = predict(params, batch)?;
        let mut g = Graph::new();
        let p = g.constant(prob);
        let masks: Vec<Mask> = batch.iter().map(|s| s.mask.clone()).collect();
        let l = bce_loss(&mut g, p, &masks)?;
        total += g.value(l).data()[0] as f64 * batch.len() as f64;
    }
    Ok(total / ds.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub confusion: Confusion,
    pub metrics: MetricTriple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: Vec<SampleMetrics>,
    /// Mean of the per-image metrics.
    pub macro_avg: MetricTriple,
    /// Metrics of the pixel counts pooled over all images.
    pub micro: MetricTriple,
}

impl Evaluation {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Result<Self> {
        let per: Vec<MetricTriple> = samples.iter().map(|s| s.metrics).collect();
        let macro_avg = MetricTriple::mean(&per)?;
        let pooled = samples
            .iter()
            .fold(Confusion::default(), |acc, s| acc + s.confusion);
        Ok(Evaluation {
            samples,
            macro_avg,
            micro: pooled.triple()?,
        })
    }
}

/// Binarize eval-mode predictions and score each image.
pub fn evaluate_model(ds: &Dataset, params: &ModelParams<f32>, cfg: &TrainConfig) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::data("cannot evaluate an empty dataset"));
    }
    check_sizes(ds, &params.config)?;
    let samples: Vec<&Sample> = ds.samples().iter().collect();
    let mut rows = Vec::with_capacity(samples.len());
    for batch in samples.chunks(cfg.batch_size.max(1)) {
        let prob = predict(params, batch)?;
        for (s, pred) in batch.iter().zip(binarize(&prob, cfg.binarize_threshold)?) {
            let c = confusion_counts(&pred, &s.mask)?;
            rows.push(SampleMetrics {
                id: s.id.clone(),
                confusion: c,
                metrics: c.triple()?,
            });
        }
    }
    Evaluation::from_samples(rows)
}
