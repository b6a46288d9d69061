use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distill::{config_matrix, DistilledModel, Mode};
use crate::embedding::Query;
use crate::env::{Action, Configuration, Encoder, Env, State, ACTION_DIM};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::provider::{Concept, Split};

use super::{observe, Policy, Scorer, Task};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: State,
    pub action: Action,
    pub reward: f64,
}

/// One episode: `T` steps and the configuration after the last action.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub postultimate_config: Configuration,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `s_0 … s_T` configurations, postultimate included.
    pub fn configs(&self) -> Vec<Configuration> {
        let mut v: Vec<Configuration> = self.steps.iter().map(|s| s.state.config).collect();
        v.push(self.postultimate_config);
        v
    }

    /// Scores of `s_0 … s_T` against `query`.
    pub fn scores(&self, query: &Query, scorer: Scorer<'_>) -> Result<Vec<f64>> {
        scorer.scores(&self.configs(), std::slice::from_ref(query))
    }
}

/// What the rewards stored in a rollout measure.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Goal(&'a Configuration),
    ScoreDifference(Scorer<'a>, &'a Query),
    RawScore(Scorer<'a>, &'a Query),
}

/// Runs one episode. With `deterministic` the mean action is taken;
/// otherwise actions are sampled from a stream seeded by `env_seed`.
pub fn rollout(
    env: &Env,
    policy: &Policy,
    env_seed: u64,
    task: &Task,
    deterministic: bool,
    objective: Objective<'_>,
) -> Result<Trajectory> {
    task.check_for(policy)?;
    let cond_v = task.conditioning();
    let cond = Array2::from_shape_vec((1, cond_v.len()), cond_v).expect("one row");
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed ^ 0x5EED_AC71);
    let std = policy.log_std.mapv(f64::exp);
    let mut s = env.reset(env_seed);
    let mut states = Vec::with_capacity(env.horizon());
    let mut actions = Vec::with_capacity(env.horizon());
    while s.timestep < env.horizon() {
        let obs = Array2::from_shape_vec((1, super::OBS_DIM), observe(&s, env.horizon()).to_vec()).expect("one row");
        let mean = policy.forward(&obs, &cond)?.mean;
        let mut a = [0.0; ACTION_DIM];
        for (k, v) in a.iter_mut().enumerate() {
            *v = mean[[0, k]];
            if !deterministic {
                let eps: f64 = rng.sample(StandardNormal);
                *v += std[[0, k]] * eps;
            }
        }
        let action = Action::from_slice(&a);
        states.push(s);
        actions.push(action);
        s = env.step(&s, &action)?;
    }
    let mut configs: Vec<Configuration> = states.iter().map(|st| st.config).collect();
    configs.push(s.config);
    let rewards: Vec<f64> = match objective {
        Objective::Goal(g) => configs.windows(2).map(|w| w[0].distance(g) - w[1].distance(g)).collect(),
        Objective::ScoreDifference(sc, q) => {
            let v = sc.scores(&configs, std::slice::from_ref(q))?;
            v.windows(2).map(|w| w[1] - w[0]).collect()
        }
        Objective::RawScore(sc, q) => {
            let v = sc.scores(&configs, std::slice::from_ref(q))?;
            v[..v.len() - 1].to_vec()
        }
    };
    Ok(Trajectory {
        steps: states
            .into_iter()
            .zip(actions)
            .zip(rewards)
            .map(|((state, action), reward)| Step { state, action, reward })
            .collect(),
        postultimate_config: s.config,
    })
}

/// `Σ γ^t r_t` over the stored rewards.
pub fn vlm_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut total = 0.0;
    for s in &traj.steps {
        total += g * s.reward;
        g *= gamma;
    }
    total
}

/// `Σ γ^t (s_{t+1} − s_t)` for a score sequence `s_0 … s_T`.
pub fn discounted_difference_return(scores: &[f64], gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut total = 0.0;
    for w in scores.windows(2) {
        total += g * (w[1] - w[0]);
        g *= gamma;
    }
    total
}

/// Highest score over the visited configurations `s_0 … s_{T−1}`.
pub fn best_in_trajectory(traj: &Trajectory, query: &Query, scorer: Scorer<'_>) -> Result<f64> {
    let configs: Vec<Configuration> = traj.steps.iter().map(|s| s.state.config).collect();
    if configs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let s = scorer.scores(&configs, std::slice::from_ref(query))?;
    Ok(s.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "GCRL-R")]
    GcrlR,
    #[serde(rename = "GCRL-D")]
    GcrlD,
    #[serde(rename = "GCRL-F")]
    GcrlF,
    #[serde(rename = "GCRL-S")]
    GcrlS,
    #[serde(rename = "MTRL-train")]
    MtrlTrain,
    #[serde(rename = "MTRL-test")]
    MtrlTest,
    #[serde(rename = "STRL")]
    Strl,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::GcrlR,
        Variant::GcrlD,
        Variant::GcrlF,
        Variant::GcrlS,
        Variant::MtrlTrain,
        Variant::MtrlTest,
        Variant::Strl,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::GcrlR => "GCRL-R",
            Variant::GcrlD => "GCRL-D",
            Variant::GcrlF => "GCRL-F",
            Variant::GcrlS => "GCRL-S",
            Variant::MtrlTrain => "MTRL-train",
            Variant::MtrlTest => "MTRL-test",
            Variant::Strl => "STRL",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown variant {s:?}")))
    }
}

/// A trained policy and what it is conditioned on for one concept.
#[derive(Debug, Clone)]
pub struct Agent<'a> {
    pub policy: &'a Policy,
    pub task: Task,
}

/// The agents of one variant, keyed by concept name.
#[derive(Debug, Clone)]
pub struct VariantAgents<'a> {
    pub variant: Variant,
    pub agents: BTreeMap<String, Agent<'a>>,
}

impl<'a> VariantAgents<'a> {
    /// One goal-conditioned policy given a goal per concept.
    pub fn gcrl(variant: Variant, policy: &'a Policy, goals: &BTreeMap<String, Configuration>) -> Self {
        Self {
            variant,
            agents: goals
                .iter()
                .map(|(name, g)| (name.clone(), Agent { policy, task: Task::Goal(*g) }))
                .collect(),
        }
    }

    /// One query-conditioned policy over the concepts of the variant's split.
    pub fn mtrl(variant: Variant, policy: &'a Policy, concepts: &[Concept]) -> Self {
        let mut me = Self {
            variant,
            agents: BTreeMap::new(),
        };
        for c in concepts {
            if me.covers(c) {
                me.agents.insert(c.name.clone(), Agent { policy, task: Task::Query(c.query()) });
            }
        }
        me
    }

    /// One single-task policy per concept.
    pub fn strl(policies: &'a BTreeMap<String, Policy>, concepts: &[Concept]) -> Self {
        Self {
            variant: Variant::Strl,
            agents: concepts
                .iter()
                .filter_map(|c| {
                    let policy = policies.get(&c.name)?;
                    Some((c.name.clone(), Agent { policy, task: Task::Fixed(c.query()) }))
                })
                .collect(),
        }
    }

    /// Whether `concept` falls in this variant's evaluation scope: the
    /// matching split for the multi-task variants, the trained concepts for
    /// single-task agents, and every concept otherwise.
    pub fn covers(&self, concept: &Concept) -> bool {
        match self.variant {
            Variant::MtrlTrain => concept.split == Split::Train,
            Variant::MtrlTest => concept.split == Split::Test,
            Variant::Strl => self.agents.contains_key(&concept.name),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcaRow {
    pub variant: Variant,
    pub concept: String,
    pub exact_return: f64,
    pub approx_return: f64,
    pub exact_best: f64,
    pub approx_best: f64,
    /// Distance from the postultimate configuration to the concept's
    /// source configuration; absent for concepts without one.
    pub final_goal_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub concepts: usize,
    pub exact_return: f64,
    pub approx_return: f64,
    pub exact_best: f64,
    pub approx_best: f64,
    pub final_goal_distance: Option<f64>,
}

/// Per-concept comparison of mean approximate VLM return between two
/// variants, over the concepts both were evaluated on. For those concepts
/// `wins + losses + ties` is their count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinCount {
    pub a: Variant,
    pub b: Variant,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub batch: usize,
    pub distilled_ms: f64,
    pub exact_ms: f64,
    /// Exact time over distilled time.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcaReport {
    /// How actions are chosen during evaluation.
    pub action_mode: String,
    pub episodes: usize,
    pub gamma: f64,
    pub rows: Vec<LcaRow>,
    pub aggregate: Vec<VariantSummary>,
    pub win_rates: Vec<WinCount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<SpeedReport>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_pair(
    env: &Env,
    agent: &Agent<'_>,
    concept: &Concept,
    variant: Variant,
    encoder: &Encoder,
    model: &DistilledModel,
    episodes: usize,
    seed: u64,
    gamma: f64,
) -> Result<LcaRow> {
    let query = concept.query();
    let (exact, approx) = (Scorer::Exact(encoder), Scorer::Distilled(model));
    let mut acc = [0.0; 5];
    for ep in 0..episodes {
        let traj = rollout(env, agent.policy, seed + ep as u64, &agent.task, true, Objective::ScoreDifference(approx, &query))?;
        let exact_scores = traj.scores(&query, exact)?;
        let approx_scores = traj.scores(&query, approx)?;
        let t = traj.len();
        acc[0] += discounted_difference_return(&exact_scores, gamma);
        acc[1] += vlm_return(&traj, gamma);
        acc[2] += exact_scores[..t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        acc[3] += approx_scores[..t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if let Some(src) = &concept.source_config {
            acc[4] += traj.postultimate_config.distance(src);
        }
    }
    let n = episodes as f64;
    Ok(LcaRow {
        variant,
        concept: concept.name.clone(),
        exact_return: acc[0] / n,
        approx_return: acc[1] / n,
        exact_best: acc[2] / n,
        approx_best: acc[3] / n,
        final_goal_distance: concept.source_config.map(|_| acc[4] / n),
    })
}

/// Evaluates every variant on the concepts in its scope with mode actions. Episode
/// `e` of every pair uses environment seed `seed + e`, so the report is a
/// pure function of the policies, concepts and seed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_lca(
    env: &Env,
    variants: &[VariantAgents<'_>],
    concepts: &[Concept],
    encoder: &Encoder,
    model: &DistilledModel,
    episodes: usize,
    seed: u64,
    gamma: f64,
) -> Result<LcaReport> {
    if episodes == 0 {
        return Err(Error::ConfigInvalid("episodes must be positive".into()));
    }
    let mut pairs = Vec::new();
    for va in variants {
        for c in concepts.iter().filter(|c| va.covers(c)) {
            let agent = va
                .agents
                .get(&c.name)
                .ok_or_else(|| Error::MissingArtifact(format!("{} agent for concept {:?}", va.variant.label(), c.name)))?;
            pairs.push((va.variant, agent, c));
        }
    }
    let rows: Vec<LcaRow> = par::map_indexed(Exec::default(), pairs.len(), |i| {
        let (v, agent, c) = pairs[i];
        evaluate_pair(env, agent, c, v, encoder, model, episodes, seed, gamma)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut aggregate = Vec::new();
    for va in variants {
        let mine: Vec<&LcaRow> = rows.iter().filter(|r| r.variant == va.variant).collect();
        let dists: Vec<f64> = mine.iter().filter_map(|r| r.final_goal_distance).collect();
        aggregate.push(VariantSummary {
            variant: va.variant,
            concepts: mine.len(),
            exact_return: mean(mine.iter().map(|r| r.exact_return)),
            approx_return: mean(mine.iter().map(|r| r.approx_return)),
            exact_best: mean(mine.iter().map(|r| r.exact_best)),
            approx_best: mean(mine.iter().map(|r| r.approx_best)),
            final_goal_distance: (!dists.is_empty()).then(|| mean(dists.into_iter())),
        });
    }

    let by_key: BTreeMap<(Variant, &str), f64> = rows.iter().map(|r| ((r.variant, r.concept.as_str()), r.approx_return)).collect();
    let mut win_rates = Vec::new();
    for (i, a) in variants.iter().enumerate() {
        for b in &variants[i + 1..] {
            let mut w = WinCount {
                a: a.variant,
                b: b.variant,
                wins: 0,
                losses: 0,
                ties: 0,
            };
            for c in concepts {
                let (Some(x), Some(y)) = (by_key.get(&(a.variant, c.name.as_str())), by_key.get(&(b.variant, c.name.as_str()))) else {
                    continue;
                };
                match x.partial_cmp(y) {
                    Some(std::cmp::Ordering::Greater) => w.wins += 1,
                    Some(std::cmp::Ordering::Less) => w.losses += 1,
                    _ => w.ties += 1,
                }
            }
            win_rates.push(w);
        }
    }

    Ok(LcaReport {
        action_mode: "mode".into(),
        episodes,
        gamma,
        rows,
        aggregate,
        win_rates,
        speed: None,
    })
}

/// Times one distilled batch forward pass against exact embedding of the
/// same configurations. Each side takes the median of `reps` runs.
pub fn measure_speed(model: &DistilledModel, encoder: &Encoder, configs: &[Configuration], reps: usize) -> Result<SpeedReport> {
    if configs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reps = reps.max(1);
    let x = config_matrix(configs);
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut d = Vec::with_capacity(reps);
    let mut e = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(model.forward_batch(&x, Mode::Infer)?);
        d.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        for c in configs {
            std::hint::black_box(encoder.true_config_embedding(c)?);
        }
        e.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (distilled_ms, exact_ms) = (median(d), median(e));
    Ok(SpeedReport {
        batch: configs.len(),
        distilled_ms,
        exact_ms,
        ratio: exact_ms / distilled_ms.max(1e-9),
    })
}
