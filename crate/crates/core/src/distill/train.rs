use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{config_matrix, DistilledModel, Mode};
use crate::embedding::{normalize, Query};
use crate::env::Configuration;
use crate::error::{Error, Result};
use crate::nn::{AdamHyper, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillHyper {
    pub width: usize,
    pub blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, decayed by a cosine schedule to
    /// `lr * final_lr_fraction` at the last step.
    pub lr: f64,
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub holdout_fraction: f64,
    /// Number of held-out targets reused as probe queries for the score RMSE.
    pub probe_queries: usize,
    pub seed: u64,
}

impl DistillHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0
            && self.blocks > 0
            && self.batch_size > 0
            && self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..=1.0).contains(&self.final_lr_fraction)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.dropout)
            && (0.0..1.0).contains(&self.holdout_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid("distill hyperparameters out of range".into()))
        }
    }
}

impl Default for DistillHyper {
    fn default() -> Self {
        Self {
            width: 128,
            blocks: 4,
            epochs: 60,
            batch_size: 256,
            lr: 1e-3,
            final_lr_fraction: 0.01,
            weight_decay: 0.01,
            dropout: 0.01,
            holdout_fraction: 0.1,
            probe_queries: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Mean per-component squared error over the last epoch, or over the
    /// training split at initialization when no epoch ran.
    pub train_mse: Option<f64>,
    pub heldout_embedding_rmse: f64,
    pub heldout_score_rmse: f64,
    /// Embedding RMSE of the all-zero predictor on the same rows.
    pub heldout_zero_rmse: f64,
    pub heldout_rows: usize,
}

fn check_aligned(configs: &[Configuration], targets: ArrayView2<f32>, dim: usize) -> Result<()> {
    if configs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if configs.len() != targets.nrows() {
        return Err(Error::Misaligned(format!(
            "{} configurations vs {} embeddings",
            configs.len(),
            targets.nrows()
        )));
    }
    if targets.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: targets.ncols(),
        });
    }
    Ok(())
}

fn gather(configs: &[Configuration], targets: ArrayView2<f32>, idx: &[usize]) -> (Vec<Configuration>, Array2<f64>) {
    let qs = idx.iter().map(|&i| configs[i]).collect();
    let t = Array2::from_shape_fn((idx.len(), targets.ncols()), |(r, c)| targets[[idx[r], c]] as f64);
    (qs, t)
}

/// Embedding and score RMSE of `model` against exact targets.
///
/// Embedding RMSE is `sqrt(Σ‖ê − e‖² / (n·d))`; score RMSE is the RMS of
/// `(ê − e)·q` over every (row, query) pair.
pub fn evaluate(
    model: &DistilledModel,
    configs: &[Configuration],
    targets: ArrayView2<f32>,
    queries: &[Query],
) -> Result<TrainReport> {
    check_aligned(configs, targets, model.dim())?;
    let pred = model.predict(configs)?;
    let t = targets.mapv(|v| v as f64);
    let n = configs.len();
    let d = model.dim() as f64;
    let diff = &pred - &t;
    let emb = (diff.iter().map(|x| x * x).sum::<f64>() / (n as f64 * d)).sqrt();
    let zero = (t.iter().map(|x| x * x).sum::<f64>() / (n as f64 * d)).sqrt();
    let score = if queries.is_empty() {
        0.0
    } else {
        let mut qm = Array2::zeros((model.dim(), queries.len()));
        for (j, q) in queries.iter().enumerate() {
            if q.dim() != model.dim() {
                return Err(Error::DimensionMismatch {
                    expected: model.dim(),
                    got: q.dim(),
                });
            }
            qm.column_mut(j).iter_mut().zip(q.values()).for_each(|(a, b)| *a = *b);
        }
        let s = diff.dot(&qm);
        (s.iter().map(|x| x * x).sum::<f64>() / s.len() as f64).sqrt()
    };
    Ok(TrainReport {
        epochs: 0,
        train_mse: None,
        heldout_embedding_rmse: emb,
        heldout_score_rmse: score,
        heldout_zero_rmse: zero,
        heldout_rows: n,
    })
}

/// Trains a fresh model. See [`train_from`].
pub fn train(configs: &[Configuration], targets: ArrayView2<f32>, hyper: &DistillHyper) -> Result<(DistilledModel, TrainReport)> {
    let model = DistilledModel::new(hyper.width, hyper.blocks, targets.ncols(), hyper.seed);
    train_from(model, configs, targets, hyper)
}

/// Continues training `model` with AdamW on the per-component MSE.
///
/// A seeded shuffle reserves `holdout_fraction` of the rows for the report;
/// the probe queries are the normalized targets of the first held-out rows.
/// With fewer than ten rows the report is computed on the training rows.
pub fn train_from(
    mut model: DistilledModel,
    configs: &[Configuration],
    targets: ArrayView2<f32>,
    hyper: &DistillHyper,
) -> Result<(DistilledModel, TrainReport)> {
    check_aligned(configs, targets, model.dim())?;
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..configs.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = (configs.len() as f64 * hyper.holdout_fraction).round() as usize;
    let (hold_idx, train_idx) = if configs.len() >= 10 && n_hold > 0 {
        let (h, t) = order.split_at(n_hold);
        (h.to_vec(), t.to_vec())
    } else {
        (order.clone(), order)
    };

    let x_all = config_matrix(configs);
    let t_all = targets.mapv(|v| v as f64);
    let dim = model.dim() as f64;
    let mut adam = AdamState::new(model.num_params(), AdamHyper::adamw(hyper.weight_decay));
    let mut idx = train_idx.clone();
    let mut last_mse = None;
    let per_epoch = idx.chunks(hyper.batch_size).filter(|c| c.len() >= 2).count();
    let total_steps = (per_epoch * hyper.epochs).max(1) as f64;
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        idx.shuffle(&mut rng);
        let (mut sum, mut rows) = (0.0, 0usize);
        for (b, chunk) in idx.chunks(hyper.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let x = x_all.select(Axis(0), chunk);
            let t = t_all.select(Axis(0), chunk);
            let mode = Mode::Train {
                dropout: hyper.dropout,
                dropout_seed: hyper.seed.wrapping_mul(1_000_003) ^ ((epoch as u64) << 32 | b as u64),
            };
            let (out, cache) = model.forward_cached(&x, mode);
            let diff = out - &t;
            let scale = 2.0 / (chunk.len() as f64 * dim);
            sum += diff.iter().map(|v| v * v).sum::<f64>();
            rows += chunk.len();
            let dy = diff * scale;
            let (grads, _) = model.backward(&cache, &dy, true);
            let progress = step as f64 / total_steps;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let lr = hyper.lr * (hyper.final_lr_fraction + (1.0 - hyper.final_lr_fraction) * cosine);
            adam.step_tensors(model.params_mut(), &grads, lr);
            step += 1;
            model.update_running_stats(&cache, chunk.len());
        }
        if rows > 0 {
            last_mse = Some(sum / (rows as f64 * dim));
        }
    }
    if hyper.epochs == 0 {
        let (qs, t) = gather(configs, targets, &train_idx);
        let pred = model.predict(&qs)?;
        last_mse = Some((&pred - &t).iter().map(|v| v * v).sum::<f64>() / (t.len() as f64));
    }

    let (hold_q, _) = gather(configs, targets, &hold_idx);
    let hold_t = targets.select(Axis(0), &hold_idx);
    let probes = hold_idx
        .iter()
        .take(hyper.probe_queries)
        .filter_map(|&i| {
            let row: Vec<f64> = targets.row(i).iter().map(|&v| v as f64).collect();
            normalize(&row).ok().map(|e| Query {
                name: format!("probe-{i}"),
                embedding: e,
            })
        })
        .collect::<Vec<_>>();
    let mut report = evaluate(&model, &hold_q, hold_t.view(), &probes)?;
    report.epochs = hyper.epochs;
    report.train_mse = last_mse;
    Ok((model, report))
}
