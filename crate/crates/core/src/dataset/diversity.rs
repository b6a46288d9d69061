//! Diversity-seeking dataset growth.
//!
//! The loss of a batch is the mean over `i` of `max_{j≠i} cos(f̂_i, f̂_j)` on
//! the distilled embeddings. Ties in the max go to the lowest `j`.

use ndarray::{s, Array2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{embed_dataset, sample_random_policy, ConfigDataset, EmbeddingStore, Provenance};
use crate::distill::{config_matrix, train, train_from, DistillHyper, DistilledModel, TrainReport};
use crate::env::Encoder;
use crate::env::{project, Configuration, Env, CONFIG_DIM};
use crate::error::{Error, Result};
use crate::nn::{AdamHyper, AdamState};
use crate::par::{self, Exec};

const PAIR_CHUNK: usize = 128;
const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityHyper {
    /// Share of the target drawn from the random policy before optimizing.
    pub seed_fraction: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Epochs used to refresh the surrogate after each appended batch.
    pub round_epochs: usize,
}

impl DiversityHyper {
    pub fn validate(&self) -> Result<()> {
        if self.seed_fraction > 0.0 && self.seed_fraction <= 1.0 && self.batch >= 2 && self.lr.is_finite() && self.lr > 0.0 {
            Ok(())
        } else {
            Err(Error::ConfigInvalid("diversity build parameters out of range".into()))
        }
    }
}

impl Default for DiversityHyper {
    fn default() -> Self {
        Self {
            seed_fraction: 0.2,
            batch: 2048,
            steps: 100,
            lr: 0.01,
            round_epochs: 3,
        }
    }
}

fn unit_rows(f: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let norms: Vec<f64> = f
        .outer_iter()
        .map(|r| r.dot(&r).sqrt().max(MIN_NORM))
        .collect();
    let mut u = f.clone();
    for (mut r, &n) in u.outer_iter_mut().zip(&norms) {
        r /= n;
    }
    (u, norms)
}

/// For every row, the most similar other row and the cosine to it.
fn nearest_partners(u: &Array2<f64>) -> Vec<(usize, f64)> {
    let n = u.nrows();
    par::map_chunks(Exec::default(), n, PAIR_CHUNK, |r| {
        let start = r.start;
        let sims = u.slice(s![r, ..]).dot(&u.t());
        sims.outer_iter()
            .enumerate()
            .map(|(k, row)| {
                let i = start + k;
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for (j, &c) in row.iter().enumerate() {
                    if j != i && c > best.1 {
                        best = (j, c);
                    }
                }
                best
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Loss of a batch of raw (unnormalized) embeddings, one per row.
pub fn diversity_loss(f: &Array2<f64>) -> Result<f64> {
    Ok(diversity_loss_and_grad(f)?.0)
}

/// Loss and its gradient with respect to the raw embeddings. The gradient
/// flows into both members of every selected pair.
pub fn diversity_loss_and_grad(f: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = f.nrows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let (u, norms) = unit_rows(f);
    let partners = nearest_partners(&u);
    let inv_n = 1.0 / n as f64;
    let loss = partners.iter().map(|p| p.1).sum::<f64>() * inv_n;
    let mut gu = Array2::<f64>::zeros(f.raw_dim());
    for (i, &(j, _)) in partners.iter().enumerate() {
        gu.row_mut(i).scaled_add(inv_n, &u.row(j));
        gu.row_mut(j).scaled_add(inv_n, &u.row(i));
    }
    // Through the normalization: d(v/|v|) = (I - û ûᵀ) / |v|.
    let mut grad = gu;
    for ((mut g, ur), &nrm) in grad.outer_iter_mut().zip(u.outer_iter()).zip(&norms) {
        let radial = g.dot(&ur);
        g.scaled_add(-radial, &ur);
        g /= nrm;
    }
    Ok((loss, grad))
}

/// Projected Adam descent on the diversity loss of `batch` under `model`.
pub fn diversity_optimize(batch: &[Configuration], model: &DistilledModel, steps: usize, lr: f64) -> Result<Vec<Configuration>> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let mut configs = batch.to_vec();
    let mut adam = AdamState::new(batch.len() * CONFIG_DIM, AdamHyper::default());
    for _ in 0..steps {
        let x = config_matrix(&configs);
        let mut failure = None;
        let (_, dx) = model.input_grad_with(&x, |out| match diversity_loss_and_grad(out) {
            Ok((_, g)) => g,
            Err(e) => {
                failure = Some(e);
                Array2::zeros(out.raw_dim())
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let mut flat = x.into_raw_vec_and_offset().0;
        adam.step_slice(&mut flat, dx.as_slice().expect("standard layout"), lr);
        configs = flat
            .chunks_exact(CONFIG_DIM)
            .map(project)
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(configs)
}

/// Result of [`build_diversity_dataset`].
#[derive(Debug, Clone)]
pub struct DiversityBuild {
    pub dataset: ConfigDataset,
    pub store: EmbeddingStore,
    /// Surrogate as last refreshed, trained on all but the final batch.
    pub model: DistilledModel,
    pub reports: Vec<TrainReport>,
}

/// Grows a dataset to `target` configurations.
///
/// Starts from a random-policy seed set, then repeats: refresh the surrogate
/// on everything collected so far (warm-started after the first round),
/// draw a batch without replacement, push it apart with
/// [`diversity_optimize`], embed the results exactly, and append them.
pub fn build_diversity_dataset(
    env: &Env,
    encoder: &Encoder,
    target: usize,
    seed: u64,
    hyper: &DiversityHyper,
    distill: &DistillHyper,
) -> Result<DiversityBuild> {
    hyper.validate()?;
    if target == 0 {
        return Err(Error::ConfigInvalid("diversity target must be positive".into()));
    }
    let seed_n = ((target as f64 * hyper.seed_fraction).ceil() as usize).clamp(2.min(target), target);
    let mut configs = sample_random_policy(env, seed_n, seed).configs;
    let mut store = embed_dataset(encoder, &configs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
    let mut model = DistilledModel::new(distill.width, distill.blocks, encoder.dim(), distill.seed);
    let mut reports = Vec::new();
    let mut round = 0u64;
    while configs.len() < target {
        let epochs = if round == 0 { distill.epochs } else { hyper.round_epochs };
        let h = DistillHyper {
            epochs,
            seed: distill.seed.wrapping_add(round),
            ..distill.clone()
        };
        let (m, report) = if round == 0 {
            train(&configs, store.matrix().view(), &h)?
        } else {
            train_from(model, &configs, store.matrix().view(), &h)?
        };
        model = m;
        reports.push(report);

        let m = hyper.batch.min(configs.len());
        let picked: Vec<Configuration> = index::sample(&mut rng, configs.len(), m)
            .into_iter()
            .map(|i| configs[i])
            .collect();
        let mut moved = diversity_optimize(&picked, &model, hyper.steps, hyper.lr)?;
        moved.truncate(target - configs.len());
        let fresh = embed_dataset(encoder, &moved)?;
        store.append(&fresh)?;
        configs.extend(moved);
        round += 1;
    }
    Ok(DiversityBuild {
        dataset: ConfigDataset::new(configs, Provenance::Diversity, seed),
        store,
        model,
        reports,
    })
}

/// Reference loss by explicit double loop; used to cross-check the batched path.
#[cfg(test)]
fn loss_by_double_loop(f: &Array2<f64>) -> f64 {
    let n = f.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (f.row(i), f.row(j));
            let c = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
            best = best.max(c);
        }
        total += best;
    }
    total / n as f64
}
