//! One node's local training for a single communication round.
//!
//! Mini-batch SGD with momentum for up to `max_local_epochs` epochs. The
//! starting parameters are scored on the local validation split first, then
//! after every epoch; training stops once validation loss has failed to
//! improve for `early_stop_patience` epochs in a row, and the best-scoring
//! parameters are returned.

use rand::seq::SliceRandom;

use crate::corruption::DataView;
use crate::dataset::PIXELS;
use crate::neuralnet::{self, loss_and_grad, sgd_momentum_step, NnError, ParamSet};
use crate::rng::{derive, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub max_local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_local_epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            momentum: 0.9,
            early_stop_patience: 1,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    /// Range violations as `(key, message)` pairs.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push(("batch_size", "must be positive".to_string()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push((
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if self.early_stop_patience == 0 {
            out.push(("early_stop_patience", "must be positive".to_string()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            out.push((
                "val_fraction",
                format!("must lie in (0, 1), got {}", self.val_fraction),
            ));
        }
        out
    }
}

/// A node's train/validation indices seen through the (possibly corrupted)
/// training data.
#[derive(Debug, Clone, Copy)]
pub struct LocalData<'a> {
    pub view: DataView<'a>,
    pub train: &'a [usize],
    pub val: &'a [usize],
}

/// Where a node's random streams come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub node: usize,
    pub round: usize,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ParamSet,
    /// Aggregation weight: number of training (not validation) samples.
    pub train_size: usize,
    pub epochs_run: usize,
    /// 0 means the starting parameters were never beaten.
    pub best_epoch: usize,
    /// Validation loss before training and after each completed epoch.
    pub val_losses: Vec<f64>,
    /// Mean mini-batch loss of the last epoch run.
    pub last_train_loss: Option<f64>,
}

pub(crate) fn gather(
    view: &DataView<'_>,
    indices: &[usize],
    inputs: &mut Vec<f64>,
    labels: &mut Vec<u8>,
) {
    inputs.clear();
    labels.clear();
    for &i in indices {
        inputs.extend(view.image(i).iter().map(|&v| v as f64));
        labels.push(view.label(i));
    }
}

const EVAL_CHUNK: usize = 500;

/// Mean evaluation-mode cross-entropy over `indices`.
pub fn mean_loss(p: &ParamSet, view: &DataView<'_>, indices: &[usize]) -> Result<f64, NnError> {
    let mut inputs = Vec::with_capacity(EVAL_CHUNK * PIXELS);
    let mut labels = Vec::with_capacity(EVAL_CHUNK);
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        gather(view, chunk, &mut inputs, &mut labels);
        total += neuralnet::eval_loss(p, &inputs, &labels)? * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Runs one epoch of shuffled mini-batch SGD in place; returns the mean batch loss.
pub fn train_epoch(
    params: &mut ParamSet,
    velocity: &mut ParamSet,
    view: &DataView<'_>,
    train: &[usize],
    cfg: &TrainConfig,
    rng: &mut crate::rng::SimRng,
) -> Result<f64, NnError> {
    let mut order = train.to_vec();
    order.shuffle(rng);
    let mut inputs = Vec::with_capacity(cfg.batch_size * PIXELS);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for batch in order.chunks(cfg.batch_size) {
        gather(view, batch, &mut inputs, &mut labels);
        let (loss, grads) = loss_and_grad(params, &inputs, &labels, rng)?;
        sgd_momentum_step(params, &grads, velocity, cfg.lr, cfg.momentum)?;
        loss_sum += loss;
        batches += 1;
    }
    Ok(loss_sum / batches.max(1) as f64)
}

/// Local training from `start` on `data`.
///
/// A node with no training samples returns `start` with `train_size == 0`.
/// With an empty validation split every epoch runs and the last parameters
/// are returned.
pub fn train_local(
    start: &ParamSet,
    data: &LocalData<'_>,
    cfg: &TrainConfig,
    key: StreamKey,
) -> Result<LocalOutcome, NnError> {
    let unchanged = |val_losses| LocalOutcome {
        params: start.clone(),
        train_size: data.train.len(),
        epochs_run: 0,
        best_epoch: 0,
        val_losses,
        last_train_loss: None,
    };
    if data.train.is_empty() {
        return Ok(unchanged(Vec::new()));
    }
    let has_val = !data.val.is_empty();
    let mut val_losses = Vec::new();
    if has_val {
        val_losses.push(mean_loss(start, &data.view, data.val)?);
    }
    if cfg.max_local_epochs == 0 {
        return Ok(unchanged(val_losses));
    }

    let mut params = start.clone();
    let mut velocity = start.zeros_like();
    let mut best: Option<ParamSet> = None;
    let mut best_epoch = 0;
    let mut best_loss = val_losses.first().copied().unwrap_or(f64::INFINITY);
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut last_train_loss = None;
    for epoch in 1..=cfg.max_local_epochs {
        let mut rng = derive(
            key.seed,
            Stream::Training,
            &[key.node as u64, key.round as u64, epoch as u64],
        );
        last_train_loss = Some(train_epoch(
            &mut params,
            &mut velocity,
            &data.view,
            data.train,
            cfg,
            &mut rng,
        )?);
        epochs_run = epoch;
        if !has_val {
            continue;
        }
        let loss = mean_loss(&params, &data.view, data.val)?;
        val_losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_epoch = epoch;
            best = Some(params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let params = if has_val {
        best.unwrap_or_else(|| start.clone())
    } else {
        params
    };
    Ok(LocalOutcome {
        params,
        train_size: data.train.len(),
        epochs_run,
        best_epoch: if has_val { best_epoch } else { epochs_run },
        val_losses,
        last_train_loss,
    })
}
