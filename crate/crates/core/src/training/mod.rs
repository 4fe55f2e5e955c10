//! Mini-batch Adam training with validation-based epoch selection.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};

use crate::data::{EncodedSample, Vocabulary};
use crate::error::{contract, DuaError, Result};
use crate::eval::{evaluate_model, Metric, MetricsReport};
use crate::model::{init_params, loss_and_gradients, Dua, DuaConfig, EMBEDDING};
use crate::numerics::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Row 0 of the embedding (PAD) is left
/// untouched, including its moments.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (name, _) in params.iter() {
        if grads.get(name).is_none() {
            return contract(format!("no gradient for parameter `{name}`"));
        }
        if !state.m.contains_key(name) {
            return contract(format!("no Adam moments for parameter `{name}`"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        if g.shape() != p.shape() {
            return Err(DuaError::Dimension {
                op: "adam_step",
                left: g.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        let skip = if name == EMBEDDING { p.cols() } else { 0 };
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        let (g, p) = (g.data(), p.data_mut());
        for i in skip..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Optimisation schedule and model-selection settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch shuffle.
    pub shuffle_seed: u64,
    pub learning_rate: f64,
    pub validation_metric: Metric,
    /// Candidates per validation context.
    pub valid_group_size: usize,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Where the best checkpoint and the log are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            batch_size: 200,
            epochs: 5,
            shuffle_seed: 0,
            learning_rate: 0.001,
            validation_metric: Metric::R1,
            valid_group_size: 10,
            clip_norm: Some(5.0),
            checkpoint_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| DuaError::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainPlan {
    pub const KEYS: [&'static str; 7] = [
        "batch_size",
        "epochs",
        "shuffle_seed",
        "learning_rate",
        "validation_metric",
        "valid_group_size",
        "clip_norm",
    ];

    /// Sets one field from text; `Ok(false)` for keys it does not own.
    /// `clip_norm=none` disables clipping.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "shuffle_seed" => self.shuffle_seed = parse(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "validation_metric" => self.validation_metric = value.trim().parse()?,
            "valid_group_size" => self.valid_group_size = parse(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value.trim() {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("shuffle_seed", self.shuffle_seed.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("validation_metric", self.validation_metric.to_string()),
            ("valid_group_size", self.valid_group_size.to_string()),
            (
                "clip_norm",
                self.clip_norm.map_or("none".into(), |c| format!("{c:?}")),
            ),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.valid_group_size == 0 {
            return Err(DuaError::Config("batch_size, epochs and valid_group_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(DuaError::Config("learning_rate and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub enum LogRecord {
    Batch {
        epoch: usize,
        batch: usize,
        size: usize,
        loss: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        validation: MetricsReport,
        best: bool,
    },
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogRecord::Batch {
                epoch,
                batch,
                size,
                loss,
                grad_norm,
            } => write!(
                f,
                "batch epoch={epoch} batch={batch} size={size} loss={loss} grad_norm={grad_norm}"
            ),
            LogRecord::Epoch {
                epoch,
                mean_loss,
                validation: v,
                best,
            } => write!(
                f,
                "epoch epoch={epoch} loss={mean_loss} map={} mrr={} p@1={} r@1={} r@2={} r@5={} best={best}",
                v.map, v.mrr, v.p_at_1, v.r_at_1, v.r_at_2, v.r_at_5
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the best validation metric.
    pub best: Checkpoint,
    /// Parameters after the last epoch.
    pub last: Dua,
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    /// Mean training loss of each epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { mean_loss, .. } => Some(*mean_loss),
                _ => None,
            })
            .collect()
    }

    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| format!("{r}\n")).collect()
    }
}

fn per_sample_gradients(
    config: &DuaConfig,
    params: &ParamStore,
    batch: &[&EncodedSample],
) -> Vec<Result<(f64, Gradients)>> {
    let run = |s: &&EncodedSample| loss_and_gradients(config, params, s).map(|(l, _, g)| (l, g));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(run).collect()
    }
}

/// Mean loss and mean gradients over a batch, reduced in batch order.
pub fn batch_gradients(
    config: &DuaConfig,
    params: &ParamStore,
    batch: &[&EncodedSample],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return contract("empty batch");
    }
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for r in per_sample_gradients(config, params, batch) {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g)?;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Trains from fresh parameters. See [`train_from`].
pub fn train(
    plan: &TrainPlan,
    config: &DuaConfig,
    vocab: &Vocabulary,
    train_set: &[EncodedSample],
    valid_set: &[EncodedSample],
    on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let params = init_params(config)?;
    train_from(plan, config, vocab, params, train_set, valid_set, on_record)
}

/// Shuffles under `plan.shuffle_seed` every epoch, steps Adam per batch
/// (the short final batch included), evaluates the validation set after
/// each epoch and keeps the first epoch with the best metric.
pub fn train_from(
    plan: &TrainPlan,
    config: &DuaConfig,
    vocab: &Vocabulary,
    params: ParamStore,
    train_set: &[EncodedSample],
    valid_set: &[EncodedSample],
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    plan.validate()?;
    config.validate()?;
    if train_set.is_empty() {
        return contract("training corpus is empty");
    }
    if valid_set.is_empty() || !valid_set.len().is_multiple_of(plan.valid_group_size) {
        return contract(format!(
            "validation corpus of {} samples does not split into groups of {}",
            valid_set.len(),
            plan.valid_group_size
        ));
    }

    let mut model = Dua {
        config: config.clone(),
        params,
    };
    let mut adam = AdamState::new(&model.params, plan.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=plan.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(plan.batch_size).enumerate() {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let diverged = |cause: String| DuaError::Diverged {
                epoch,
                batch: b,
                cause,
            };
            let (loss, mut grads) = match batch_gradients(config, &model.params, &batch) {
                Ok(r) => r,
                Err(DuaError::NonFinite { op }) => return Err(diverged(format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            let grad_norm = match plan.clip_norm {
                Some(c) => grads.clip_global_norm(c),
                None => grads.global_norm(),
            };
            if !grad_norm.is_finite() {
                return Err(diverged(format!("gradient norm is {grad_norm}")));
            }
            adam_step(&mut model.params, &grads, &mut adam)?;
            loss_sum += loss * batch.len() as f64;
            let rec = LogRecord::Batch {
                epoch,
                batch: b,
                size: batch.len(),
                loss,
                grad_norm,
            };
            on_record(&rec);
            log.push(rec);
        }

        let validation = evaluate_model(&model, valid_set, None, plan.valid_group_size)?;
        let value = plan.validation_metric.of(&validation);
        let improved = best.as_ref().is_none_or(|(b, _)| value > *b);
        if improved {
            let ckpt = Checkpoint {
                config: config.clone(),
                vocab: vocab.clone(),
                params: model.params.clone(),
                adam: Some(adam.clone()),
                meta: CheckpointMeta {
                    epoch,
                    metric: plan.validation_metric.to_string(),
                    validation_score: value,
                },
            };
            best = Some((value, ckpt));
        }
        let rec = LogRecord::Epoch {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            validation,
            best: improved,
        };
        on_record(&rec);
        log.push(rec);
    }

    let (_, best) = best.expect("at least one epoch ran");
    let outcome = TrainOutcome { best, last: model, log };
    if let Some(dir) = &plan.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(dir.join("best.dua"), &outcome.best)?;
        std::fs::write(dir.join("train.log"), outcome.log_text())?;
    }
    Ok(outcome)
}

/// Fraction of samples whose score falls on the labelled side of 0.5.
pub fn accuracy(model: &Dua, samples: &[EncodedSample]) -> Result<f64> {
    if samples.is_empty() {
        return contract("no samples");
    }
    let scores = crate::eval::score_all(samples, |s| model.score(s))?;
    let correct = scores
        .iter()
        .zip(samples)
        .filter(|(&p, s)| (p > 0.5) == (s.label == 1))
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests;
