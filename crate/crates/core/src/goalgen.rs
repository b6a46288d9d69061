//! Text-to-goal: retrieve the best stored configurations for a query,
//! finetune them on the distilled score, and select with the exact score.

use std::cmp::Ordering;
use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingStore;
use crate::distill::{config_matrix, DistilledModel};
use crate::embedding::{Query, Score};
use crate::env::{project, Configuration, Encoder, CONFIG_DIM};
use crate::error::{Error, Result};
use crate::nn::{AdamHyper, AdamState};
use crate::par::{self, Exec};

const RETRIEVE_CHUNK: usize = 4096;
const FINETUNE_CHUNK: usize = 32;

/// Top-k rows of a store, best first. Ties rank the lower index first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub indices: Vec<usize>,
    pub scores: Vec<Score>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Retrieved,
    Finetuned,
    Selected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalCandidate {
    pub config: Configuration,
    pub surrogate_score: Score,
    pub exact_score: Option<Score>,
    pub origin: Origin,
}

/// Score of stored row `i`: the `f32` row widened and dotted with the query
/// in index order.
#[inline]
fn row_score(store: &EmbeddingStore, i: usize, q: &[f64]) -> f64 {
    store.row(i).iter().zip(q).map(|(&a, &b)| a as f64 * b).sum()
}

fn rank(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn top_k(mut v: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if v.len() > k {
        v.select_nth_unstable_by(k - 1, rank);
        v.truncate(k);
    }
    v.sort_unstable_by(rank);
    v
}

pub fn retrieve_topk_with(store: &EmbeddingStore, query: &Query, k: usize, exec: Exec) -> Result<RetrievalResult> {
    let rows = store.rows();
    if k == 0 || k > rows {
        return Err(Error::KOutOfRange { k, rows });
    }
    if query.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            got: query.dim(),
        });
    }
    let q = query.values();
    let partial = par::map_chunks(exec, rows, RETRIEVE_CHUNK, |r| {
        top_k(r.map(|i| (i, row_score(store, i, q))).collect(), k)
    });
    let best = top_k(partial.into_iter().flatten().collect(), k);
    Ok(RetrievalResult {
        indices: best.iter().map(|p| p.0).collect(),
        scores: best.iter().map(|p| p.1).collect(),
    })
}

/// Exact brute-force top-k of `row · query` over every stored row.
pub fn retrieve_topk(store: &EmbeddingStore, query: &Query, k: usize) -> Result<RetrievalResult> {
    retrieve_topk_with(store, query, k, Exec::default())
}

fn check_query(model: &DistilledModel, query: &Query) -> Result<()> {
    if query.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: query.dim(),
        });
    }
    Ok(())
}

/// Surrogate scores `forward(q)·query` for many configurations.
pub fn surrogate_scores(model: &DistilledModel, configs: &[Configuration], query: &Query) -> Result<Vec<Score>> {
    check_query(model, query)?;
    let out = model.predict(configs)?;
    let qv = ndarray::ArrayView1::from(query.values());
    Ok(out.outer_iter().map(|r| r.dot(&qv)).collect())
}

/// Projected Adam ascent on one block of candidates. Adam is elementwise,
/// so each row evolves exactly as it would alone.
fn finetune_block(configs: &[Configuration], query: &Query, model: &DistilledModel, steps: usize, lr: f64) -> Result<Vec<GoalCandidate>> {
    let n = configs.len();
    let upstream = Array2::from_shape_fn((n, model.dim()), |(_, j)| query.values()[j]);
    let mut x = config_matrix(configs);
    let mut adam = AdamState::new(n * CONFIG_DIM, AdamHyper::default());
    for _ in 0..steps {
        let (_, dx) = model.output_and_input_grad(&x, &upstream)?;
        let ascent: Vec<f64> = dx.iter().map(|g| -g).collect();
        let flat = x.as_slice_mut().expect("standard layout");
        adam.step_slice(flat, &ascent, lr);
        for mut row in x.outer_iter_mut() {
            let p = project(row.as_slice().expect("contiguous row"))?.to_array();
            row.iter_mut().zip(p).for_each(|(a, b)| *a = b);
        }
    }
    let finals: Vec<Configuration> = (0..n)
        .map(|i| Configuration::from_slice(x.slice(s![i, ..]).as_slice().expect("contiguous row")))
        .collect::<Result<_>>()?;
    let scores = {
        let out = model.forward_batch(&x, crate::distill::Mode::Infer)?;
        let qv = ndarray::ArrayView1::from(query.values());
        out.outer_iter().map(|r| r.dot(&qv)).collect::<Vec<_>>()
    };
    Ok(finals
        .into_iter()
        .zip(scores)
        .map(|(config, surrogate_score)| GoalCandidate {
            config,
            surrogate_score,
            exact_score: None,
            origin: Origin::Finetuned,
        })
        .collect())
}

pub fn finetune_with(
    candidates: &[Configuration],
    query: &Query,
    model: &DistilledModel,
    steps: usize,
    lr: f64,
    exec: Exec,
) -> Result<Vec<GoalCandidate>> {
    check_query(model, query)?;
    for q in candidates {
        q.check_admissible()?;
    }
    let parts = par::map_chunks(exec, candidates.len(), FINETUNE_CHUNK, |r| {
        finetune_block(&candidates[r], query, model, steps, lr)
    });
    let mut out = Vec::with_capacity(candidates.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Gradient ascent on the surrogate score, each step followed by projection.
pub fn finetune(candidates: &[Configuration], query: &Query, model: &DistilledModel, steps: usize, lr: f64) -> Result<Vec<GoalCandidate>> {
    finetune_with(candidates, query, model, steps, lr, Exec::default())
}

/// Exact multiview score of one configuration.
pub fn exact_score(encoder: &Encoder, config: &Configuration, query: &Query) -> Result<Score> {
    encoder.true_config_embedding(config)?.dot(&query.embedding)
}

/// Fills `exact_score` on every candidate and returns the best one, earliest
/// on ties.
pub fn select_best(candidates: &mut [GoalCandidate], query: &Query, encoder: &Encoder) -> Result<GoalCandidate> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let scores = par::map_indexed(Exec::default(), candidates.len(), |i| {
        exact_score(encoder, &candidates[i].config, query)
    });
    let mut best = 0;
    for (i, s) in scores.into_iter().enumerate() {
        let s = s?;
        candidates[i].exact_score = Some(s);
        if s > candidates[best].exact_score.expect("filled in order") {
            best = i;
        }
    }
    Ok(GoalCandidate {
        origin: Origin::Selected,
        ..candidates[best].clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Retrieve,
    Finetune,
    Select,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieve" => Ok(Stage::Retrieve),
            "finetune" => Ok(Stage::Finetune),
            "select" => Ok(Stage::Select),
            other => Err(Error::ConfigInvalid(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoalOptions {
    pub k: usize,
    pub steps: usize,
    pub lr: f64,
    pub stop_after: Stage,
}

impl Default for GoalOptions {
    fn default() -> Self {
        Self {
            k: 256,
            steps: 80,
            lr: 0.02,
            stop_after: Stage::Select,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub best_surrogate: Score,
    pub best_exact: Score,
    /// Wall-clock time; not serialized, so reports stay reproducible.
    #[serde(skip)]
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalOutcome {
    pub goal: GoalCandidate,
    pub stages: Vec<StageReport>,
}

fn argmax_by<T>(items: &[T], key: impl Fn(&T) -> f64) -> usize {
    let mut best = 0;
    for (i, it) in items.iter().enumerate() {
        if key(it) > key(&items[best]) {
            best = i;
        }
    }
    best
}

/// Runs the pipeline up to `options.stop_after`.
///
/// After retrieval the goal is the top-1 row. After finetuning it is the
/// candidate with the best surrogate score. After selection it is the
/// finetuned candidate with the best exact score. Each stage's timing
/// covers its own work only; the exact scores recorded for the retrieve and
/// finetune stages are diagnostics and are excluded from the timings.
pub fn generate_goal(
    query: &Query,
    store: &EmbeddingStore,
    configs: &[Configuration],
    model: &DistilledModel,
    encoder: &Encoder,
    options: &GoalOptions,
) -> Result<GoalOutcome> {
    if store.rows() != configs.len() {
        return Err(Error::Misaligned(format!(
            "{} stored embeddings vs {} configurations",
            store.rows(),
            configs.len()
        )));
    }
    let k = options.k.min(store.rows());
    let mut stages = Vec::new();

    let t = Instant::now();
    let hits = retrieve_topk(store, query, k)?;
    let retrieved: Vec<Configuration> = hits.indices.iter().map(|&i| configs[i]).collect();
    let millis = t.elapsed().as_secs_f64() * 1e3;
    let surrogate = surrogate_scores(model, &retrieved, query)?;
    let top = GoalCandidate {
        config: retrieved[0],
        surrogate_score: surrogate[0],
        exact_score: Some(exact_score(encoder, &retrieved[0], query)?),
        origin: Origin::Retrieved,
    };
    stages.push(StageReport {
        stage: Stage::Retrieve,
        best_surrogate: surrogate.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        best_exact: top.exact_score.expect("just set"),
        millis,
    });
    if options.stop_after == Stage::Retrieve {
        return Ok(GoalOutcome { goal: top, stages });
    }

    let t = Instant::now();
    let mut tuned = finetune(&retrieved, query, model, options.steps, options.lr)?;
    let millis = t.elapsed().as_secs_f64() * 1e3;
    let b = argmax_by(&tuned, |c| c.surrogate_score);
    let mut by_surrogate = tuned[b].clone();
    by_surrogate.exact_score = Some(exact_score(encoder, &by_surrogate.config, query)?);
    stages.push(StageReport {
        stage: Stage::Finetune,
        best_surrogate: by_surrogate.surrogate_score,
        best_exact: by_surrogate.exact_score.expect("just set"),
        millis,
    });
    if options.stop_after == Stage::Finetune {
        return Ok(GoalOutcome {
            goal: by_surrogate,
            stages,
        });
    }

    let t = Instant::now();
    let chosen = select_best(&mut tuned, query, encoder)?;
    stages.push(StageReport {
        stage: Stage::Select,
        best_surrogate: chosen.surrogate_score,
        best_exact: chosen.exact_score.expect("filled by selection"),
        millis: t.elapsed().as_secs_f64() * 1e3,
    });
    Ok(GoalOutcome { goal: chosen, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{embed_dataset, sample_uniform};
    use crate::nn::Linear;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_of(rows: Array2<f32>) -> EmbeddingStore {
        EmbeddingStore::new(rows)
    }

    fn oracle(store: &EmbeddingStore, q: &Query, k: usize) -> RetrievalResult {
        let mut all: Vec<(usize, f64)> = (0..store.rows())
            .map(|i| {
                let mut s = 0.0;
                for j in 0..store.dim() {
                    s += store.row(i)[j] as f64 * q.values()[j];
                }
                (i, s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        RetrievalResult {
            indices: all.iter().map(|p| p.0).collect(),
            scores: all.iter().map(|p| p.1).collect(),
        }
    }

    fn model_with_readout(seed: u64, dim: usize) -> DistilledModel {
        let mut m = DistilledModel::new(32, 2, dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.output = Linear::new(32, dim, 0.5, &mut rng);
        m
    }

    #[test]
    fn analytic_top_two() {
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let store = store_of(array![[1.0, 0.0], [0.0, 1.0], [h, h]]);
        let q = Query::from_raw("x", &[1.0, 0.0]).unwrap();
        let r = retrieve_topk(&store, &q, 2).unwrap();
        assert_eq!(r.indices, vec![0, 2]);
        assert_eq!(r.scores[0], 1.0);
        assert!((r.scores[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(matches!(retrieve_topk(&store, &q, 4), Err(Error::KOutOfRange { k: 4, rows: 3 })));
        assert!(matches!(retrieve_topk(&store, &q, 0), Err(Error::KOutOfRange { .. })));
        let q3 = Query::from_raw("y", &[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(retrieve_topk(&store, &q3, 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn duplicate_rows_rank_lower_index_first() {
        let store = store_of(array![[0.0, 1.0], [0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]);
        let q = Query::from_raw("x", &[0.6, 0.8]).unwrap();
        assert_eq!(retrieve_topk(&store, &q, 3).unwrap().indices, vec![1, 2, 3]);
    }

    #[test]
    fn full_ranking_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 9000;
        let mut m = Array2::from_shape_simple_fn((n, 8), || rng.random_range(-1.0f32..1.0));
        // Plant ties across chunk boundaries.
        let dup = m.row(5).to_owned();
        m.row_mut(8000).assign(&dup);
        m.row_mut(4100).assign(&dup);
        let store = store_of(m);
        let q = Query::from_raw("q", &[0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2]).unwrap();
        for k in [1, 16, 256, n] {
            let got = retrieve_topk_with(&store, &q, k, Exec::Sequential).unwrap();
            assert_eq!(got, oracle(&store, &q, k));
            assert_eq!(got, retrieve_topk(&store, &q, k).unwrap());
        }
    }

    #[test]
    fn finetune_zero_steps_and_stationary_model() {
        let configs = sample_uniform(6, 1).configs;
        let q = Query::from_raw("q", &[1.0; 16]).unwrap();
        let m = model_with_readout(2, 16);
        let out = finetune(&configs, &q, &m, 0, 0.02).unwrap();
        let init = surrogate_scores(&m, &configs, &q).unwrap();
        for ((c, o), s) in configs.iter().zip(&out).zip(init) {
            assert_eq!(&o.config, c);
            assert_eq!(o.surrogate_score, s);
        }
        let flat = DistilledModel::new(32, 2, 16, 3);
        let out = finetune(&configs, &q, &flat, 80, 0.02).unwrap();
        assert!(out.iter().zip(&configs).all(|(o, c)| &o.config == c));
    }

    #[test]
    fn finetune_is_per_candidate_independent_and_improves() {
        let configs = sample_uniform(70, 4).configs;
        let q = Query::from_raw("q", &(0..16).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>()).unwrap();
        let m = model_with_readout(5, 16);
        let together = finetune(&configs, &q, &m, 30, 0.02).unwrap();
        for (i, c) in configs.iter().enumerate().step_by(7) {
            let alone = finetune_with(std::slice::from_ref(c), &q, &m, 30, 0.02, Exec::Sequential).unwrap();
            assert_eq!(alone[0], together[i]);
        }
        assert_eq!(together, finetune_with(&configs, &q, &m, 30, 0.02, Exec::Sequential).unwrap());
        assert!(together.iter().all(|c| c.config.is_admissible()));
        let before: f64 = surrogate_scores(&m, &configs, &q).unwrap().iter().sum();
        let after: f64 = together.iter().map(|c| c.surrogate_score).sum();
        assert!(after >= before);
    }

    #[test]
    fn finetune_rejects_inadmissible_input() {
        let mut c = sample_uniform(1, 0).configs;
        c[0].joints[1] = 3.0;
        let q = Query::from_raw("q", &[1.0; 16]).unwrap();
        assert!(finetune(&c, &q, &model_with_readout(0, 16), 1, 0.02).is_err());
    }

    #[test]
    fn select_best_rules() {
        let enc = Encoder::default_views(0);
        let configs = sample_uniform(8, 3).configs;
        let source = configs[5];
        let q = Query {
            name: "src".into(),
            embedding: crate::embedding::normalize(enc.true_config_embedding(&source).unwrap().values()).unwrap(),
        };
        let mut cands: Vec<GoalCandidate> = configs
            .iter()
            .map(|&config| GoalCandidate {
                config,
                surrogate_score: 0.0,
                exact_score: None,
                origin: Origin::Finetuned,
            })
            .collect();
        let best = select_best(&mut cands, &q, &enc).unwrap();
        assert_eq!(best.config, source);
        assert_eq!(best.origin, Origin::Selected);
        assert!(cands.iter().all(|c| c.exact_score.is_some()));

        let mut single = cands[..1].to_vec();
        assert_eq!(select_best(&mut single, &q, &enc).unwrap().config, configs[0]);

        let mut twins = vec![cands[2].clone(), cands[2].clone()];
        twins[1].surrogate_score = 1.0;
        assert_eq!(select_best(&mut twins, &q, &enc).unwrap().surrogate_score, 0.0);
        assert!(matches!(select_best(&mut [], &q, &enc), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn pipeline_stages_compose() {
        let enc = Encoder::default_views(0);
        let configs = sample_uniform(300, 8).configs;
        let store = embed_dataset(&enc, &configs).unwrap();
        let m = model_with_readout(1, enc.dim());
        let q = Query::from_raw("q", store.embedding(17).values()).unwrap();
        let top = retrieve_topk(&store, &q, 1).unwrap();

        let retrieve_only = GoalOptions {
            k: 16,
            steps: 5,
            stop_after: Stage::Retrieve,
            ..GoalOptions::default()
        };
        let out = generate_goal(&q, &store, &configs, &m, &enc, &retrieve_only).unwrap();
        assert_eq!(out.goal.config, configs[top.indices[0]]);
        assert_eq!(out.stages.len(), 1);

        for stop in [Stage::Retrieve, Stage::Finetune, Stage::Select] {
            let o = GoalOptions {
                k: 1,
                steps: 0,
                stop_after: stop,
                ..GoalOptions::default()
            };
            let out = generate_goal(&q, &store, &configs, &m, &enc, &o).unwrap();
            assert_eq!(out.goal.config, configs[top.indices[0]]);
        }

        let full = generate_goal(&q, &store, &configs, &m, &enc, &GoalOptions { k: 16, steps: 5, ..GoalOptions::default() }).unwrap();
        assert_eq!(full.stages.len(), 3);
        assert!(full.goal.config.is_admissible());
        assert!(matches!(
            generate_goal(&q, &store, &configs[1..], &m, &enc, &GoalOptions::default()),
            Err(Error::Misaligned(_))
        ));
    }
}
