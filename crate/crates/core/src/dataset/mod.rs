//! Configuration datasets, their exact embeddings, and persistence.

mod diversity;
mod io;

pub use diversity::{
    build_diversity_dataset, diversity_loss, diversity_loss_and_grad, diversity_optimize, DiversityBuild,
    DiversityHyper,
};
pub use io::{load_configs, load_embeddings, save_configs, save_embeddings, CONFIG_MAGIC, EMBEDDING_MAGIC};

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::env::{project, Action, Configuration, Env, ResetOptions, ACTION_DIM, CUBE_X_LIMITS, JOINT_LIMITS};
use crate::env::Encoder;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Cube-height reset range used by the random-policy sampler.
pub const RANDOM_POLICY_CUBE_Y: (f64, f64) = (0.15, 1.0);
/// Cube-height draw range of the uniform sampler.
pub const UNIFORM_CUBE_Y: (f64, f64) = (0.15, 2.0);
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RandomPolicy,
    Uniform,
    Diversity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDataset {
    pub configs: Vec<Configuration>,
    /// Unknown for datasets read back from disk.
    pub provenance: Option<Provenance>,
    pub seed: Option<u64>,
}

impl ConfigDataset {
    pub fn new(configs: Vec<Configuration>, provenance: Provenance, seed: u64) -> Self {
        Self {
            configs,
            provenance: Some(provenance),
            seed: Some(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

/// Precomputed embeddings, one `f32` row per configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    embeddings: Array2<f32>,
}

impl EmbeddingStore {
    pub fn new(embeddings: Array2<f32>) -> Self {
        Self { embeddings }
    }

    pub fn from_rows(rows: &[Embedding], dim: usize) -> Result<Self> {
        let mut m = Array2::zeros((rows.len(), dim));
        for (mut r, e) in m.outer_iter_mut().zip(rows) {
            if e.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: e.dim() });
            }
            r.iter_mut().zip(e.values()).for_each(|(a, &b)| *a = b as f32);
        }
        Ok(Self { embeddings: m })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn rows(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.embeddings.row(i)
    }

    /// Row `i` widened to `f64`.
    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding::new(self.row(i).iter().map(|&v| v as f64).collect()).expect("stored rows are finite")
    }

    pub fn append(&mut self, other: &EmbeddingStore) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        self.embeddings
            .append(ndarray::Axis(0), other.embeddings.view())
            .expect("widths checked");
        Ok(())
    }

    pub fn into_matrix(self) -> Array2<f32> {
        self.embeddings
    }
}

/// Collects every configuration visited by a uniform-random policy.
///
/// Episode `e` starts from `reset(seed + e)` with the cube height drawn from
/// [`RANDOM_POLICY_CUBE_Y`]; actions come from one stream seeded by `seed`.
pub fn sample_random_policy(env: &Env, n: usize, seed: u64) -> ConfigDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = ResetOptions {
        cube_y_range: Some(RANDOM_POLICY_CUBE_Y),
    };
    let mut configs = Vec::with_capacity(n);
    let mut episode = 0u64;
    while configs.len() < n {
        let mut s = env.reset_with(seed.wrapping_add(episode), opts);
        configs.push(s.config);
        while configs.len() < n && s.timestep < env.horizon() {
            let raw: [f64; ACTION_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            s = env.step(&s, &Action::from_slice(&raw)).expect("timestep below horizon");
            configs.push(s.config);
        }
        episode += 1;
    }
    ConfigDataset::new(configs, Provenance::RandomPolicy, seed)
}

/// Draws each dimension uniformly within its bounds, then projects.
pub fn sample_uniform(n: usize, seed: u64) -> ConfigDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs = (0..n)
        .map(|_| {
            let mut v = [0.0; 7];
            for (x, &(lo, hi)) in v.iter_mut().zip(&JOINT_LIMITS) {
                *x = rng.random_range(lo..=hi);
            }
            v[4] = rng.random_range(CUBE_X_LIMITS.0..=CUBE_X_LIMITS.1);
            v[5] = rng.random_range(UNIFORM_CUBE_Y.0..=UNIFORM_CUBE_Y.1);
            v[6] = rng.random_range(-PI..=PI);
            project(&v).expect("finite draw")
        })
        .collect();
    ConfigDataset::new(configs, Provenance::Uniform, seed)
}

/// Exact embeddings of every configuration, computed in row chunks.
pub fn embed_dataset_with(encoder: &Encoder, configs: &[Configuration], exec: Exec) -> Result<EmbeddingStore> {
    if configs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = encoder.dim();
    let parts = par::map_chunks(exec, configs.len(), EMBED_CHUNK, |r| {
        let mut block = Vec::with_capacity(r.len() * dim);
        for q in &configs[r] {
            let e = encoder.true_config_embedding(q)?;
            block.extend(e.values().iter().map(|&v| v as f32));
        }
        Ok::<_, Error>(block)
    });
    let mut flat = Vec::with_capacity(configs.len() * dim);
    for p in parts {
        flat.extend(p?);
    }
    Ok(EmbeddingStore::new(
        Array2::from_shape_vec((configs.len(), dim), flat).expect("row count matches"),
    ))
}

pub fn embed_dataset(encoder: &Encoder, configs: &[Configuration]) -> Result<EmbeddingStore> {
    embed_dataset_with(encoder, configs, Exec::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_policy_first_config_is_reset_state() {
        let env = Env::default();
        let ds = sample_random_policy(&env, 1, 7);
        let s0 = env.reset_with(
            7,
            ResetOptions {
                cube_y_range: Some(RANDOM_POLICY_CUBE_Y),
            },
        );
        assert_eq!(ds.configs, vec![s0.config]);
    }

    #[test]
    fn random_policy_is_reproducible_and_admissible() {
        let env = Env::default();
        let a = sample_random_policy(&env, 250, 3);
        assert_eq!(a, sample_random_policy(&env, 250, 3));
        assert_ne!(a.configs, sample_random_policy(&env, 250, 4).configs);
        assert_eq!(a.len(), 250);
        assert!(a.configs.iter().all(Configuration::is_admissible));
        // Episodes are 101 configurations long, so the third begins at index 202.
        assert!(a.configs[202].joints.iter().all(|j| j.abs() <= 0.01));
    }

    #[test]
    fn uniform_sampler_is_reproducible_and_admissible() {
        let a = sample_uniform(500, 1);
        assert_eq!(a, sample_uniform(500, 1));
        assert!(a.configs.iter().all(Configuration::is_admissible));
    }

    #[test]
    fn uniform_sampler_means_match_midpoints() {
        let n = 100_000;
        let ds = sample_uniform(n, 11);
        // Joints 1..3 have [-2.4, 2.4] bounds; joint 0 and theta have [-pi, pi].
        let bounds = [
            (0, -PI, PI),
            (1, -2.4, 2.4),
            (2, -2.4, 2.4),
            (3, -2.4, 2.4),
            (6, -PI, PI),
        ];
        for (dim, lo, hi) in bounds {
            let mean = ds.configs.iter().map(|q| q.to_array()[dim]).sum::<f64>() / n as f64;
            let se = (hi - lo) / 12f64.sqrt() / (n as f64).sqrt();
            assert!((mean - (lo + hi) / 2.0).abs() < 3.0 * se, "dim {dim}: mean {mean}");
        }
    }

    #[test]
    fn embed_dataset_matches_direct_calls_and_is_chunk_invariant() {
        let enc = Encoder::default_views(5);
        let ds = sample_uniform(1000, 2);
        let seq = embed_dataset_with(&enc, &ds.configs, Exec::Sequential).unwrap();
        let par = embed_dataset_with(&enc, &ds.configs, Exec::default()).unwrap();
        assert_eq!(seq, par);
        for i in [0, 499, 999] {
            let direct = enc.true_config_embedding(&ds.configs[i]).unwrap();
            let row: Vec<f32> = direct.values().iter().map(|&v| v as f32).collect();
            assert_eq!(seq.row(i).to_vec(), row);
        }
        for r in seq.matrix().outer_iter() {
            assert!(r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() <= 1.0 + 1e-6);
        }
        let one = embed_dataset(&enc, &ds.configs[..1]).unwrap();
        assert_eq!(one.rows(), 1);
        assert!(matches!(embed_dataset(&enc, &[]), Err(Error::EmptyDataset)));
    }
}
