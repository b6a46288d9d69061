//! Rewards, agents, PPO training and the evaluation harness for the
//! language-conditioned agents.

mod eval;
mod policy;
mod ppo;

pub use eval::{
    best_in_trajectory, discounted_difference_return, evaluate_lca, measure_speed, rollout, vlm_return, Agent, LcaReport, LcaRow,
    Objective, SpeedReport, Step, Trajectory, Variant, VariantAgents, VariantSummary, WinCount,
};
pub use policy::{Policy, PolicyKind, PolicyOutput, PolicySpec};
pub use ppo::{gae, ppo_train, ppo_update, Batch, PpoHyper, TaskSource, TrainLog, UpdateStats};

use ndarray::Array1;

use crate::distill::DistilledModel;
use crate::embedding::{dot, Query};
use crate::env::{config_of, tip_pose, Action, Configuration, Encoder, Env, State, CONFIG_DIM, JOINT_LIMITS};
use crate::error::{Error, Result};

/// Observation width: scaled configuration, scaled velocities, fingertip
/// position, fingertip-to-cube offset, time fraction.
pub const OBS_DIM: usize = 2 * CONFIG_DIM + 5;

const VELOCITY_SCALE: f64 = 0.2;
const OBS_CLIP: f64 = 5.0;

/// Fixed affine map of a configuration to roughly `[-1, 1]` per dimension.
pub fn scale_config(q: &Configuration) -> [f64; CONFIG_DIM] {
    let v = q.to_array();
    let mut out = [0.0; CONFIG_DIM];
    for (i, (lo, hi)) in JOINT_LIMITS.iter().enumerate() {
        out[i] = v[i] / ((hi - lo) / 2.0);
    }
    out[4] = v[4] / 2.0;
    out[5] = v[5] - 1.0;
    out[6] = v[6] / std::f64::consts::PI;
    out
}

/// Policy observation of a state. Fingertip features spare the policy from
/// learning forward kinematics before it can find the cube.
pub fn observe(s: &State, horizon: usize) -> [f64; OBS_DIM] {
    let mut o = [0.0; OBS_DIM];
    o[..CONFIG_DIM].copy_from_slice(&scale_config(&s.config));
    for (dst, v) in o[CONFIG_DIM..2 * CONFIG_DIM].iter_mut().zip(s.velocities) {
        *dst = (v * VELOCITY_SCALE).clamp(-OBS_CLIP, OBS_CLIP);
    }
    let (tip, _) = tip_pose(&s.config.joints);
    let k = 2 * CONFIG_DIM;
    o[k] = tip[0] / 2.0;
    o[k + 1] = tip[1] / 2.0;
    o[k + 2] = (s.config.cube_x - tip[0]) / 2.0;
    o[k + 3] = (s.config.cube_y - tip[1]) / 2.0;
    o[OBS_DIM - 1] = s.timestep as f64 / horizon.max(1) as f64;
    o
}

/// What a policy is conditioned on for one episode.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Goal(Configuration),
    Query(Query),
    /// Single-task agents see no conditioning; the query still defines
    /// their reward.
    Fixed(Query),
}

impl Task {
    /// Conditioning vector fed to the task encoder.
    pub fn conditioning(&self) -> Vec<f64> {
        match self {
            Task::Goal(g) => scale_config(g).to_vec(),
            Task::Query(q) => q.values().to_vec(),
            Task::Fixed(_) => Vec::new(),
        }
    }

    pub fn query(&self) -> Option<&Query> {
        match self {
            Task::Goal(_) => None,
            Task::Query(q) | Task::Fixed(q) => Some(q),
        }
    }

    pub(crate) fn check_for(&self, policy: &Policy) -> Result<()> {
        let ok = match (self, policy.kind()) {
            (Task::Goal(_), PolicyKind::Gcrl) | (Task::Fixed(_), PolicyKind::Strl) => true,
            (Task::Query(q), PolicyKind::Mtrl) => q.dim() == policy.cond_dim(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("task does not match a {:?} policy", policy.kind())))
        }
    }
}

/// Configuration-text score source: the encoder itself or its distilled
/// surrogate.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Exact(&'a Encoder),
    Distilled(&'a DistilledModel),
}

impl Scorer<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Scorer::Exact(e) => e.dim(),
            Scorer::Distilled(m) => m.dim(),
        }
    }

    pub fn score(&self, q: &Configuration, query: &Query) -> Result<f64> {
        Ok(self.scores(std::slice::from_ref(q), std::slice::from_ref(query))?[0])
    }

    /// Row `i` of `configs` scored against `queries[i]`, or against the
    /// single query when only one is given.
    pub fn scores(&self, configs: &[Configuration], queries: &[Query]) -> Result<Vec<f64>> {
        if queries.len() != 1 && queries.len() != configs.len() {
            return Err(Error::Misaligned(format!("{} configs, {} queries", configs.len(), queries.len())));
        }
        for q in queries {
            if q.dim() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    got: q.dim(),
                });
            }
        }
        let query = |i: usize| if queries.len() == 1 { &queries[0] } else { &queries[i] };
        match self {
            Scorer::Exact(e) => configs
                .iter()
                .enumerate()
                .map(|(i, c)| Ok(dot(e.true_config_embedding(c)?.values(), query(i).values())))
                .collect(),
            Scorer::Distilled(m) => {
                let out = m.predict(configs)?;
                Ok(out
                    .outer_iter()
                    .enumerate()
                    .map(|(i, r)| r.dot(&Array1::from(query(i).values().to_vec())))
                    .collect())
            }
        }
    }
}

/// Reward family used during training and in trajectories.
#[derive(Debug, Clone, Copy)]
pub enum RewardSpec<'a> {
    /// Decrease in distance to the goal.
    GoalDistance,
    /// Time difference of configuration-text scores.
    ScoreDifference(Scorer<'a>),
    /// Score of the pre-transition configuration, without differencing.
    RawScore(Scorer<'a>),
}

/// `‖φ(s) − g‖ − ‖φ(P(s, a)) − g‖`.
pub fn gcrl_reward(env: &Env, s: &State, a: &Action, goal: &Configuration) -> Result<f64> {
    goal.check_admissible()?;
    let next = env.step(s, a)?;
    Ok(config_of(s).distance(goal) - config_of(&next).distance(goal))
}

/// `S(φ(P(s, a)), x) − S(φ(s), x)` under the given scorer.
pub fn vlm_reward(env: &Env, s: &State, a: &Action, query: &Query, scorer: Scorer<'_>) -> Result<f64> {
    check_unit(query)?;
    let next = env.step(s, a)?;
    let sc = scorer.scores(&[config_of(s), config_of(&next)], std::slice::from_ref(query))?;
    Ok(sc[1] - sc[0])
}

/// `S(φ(s), x)`; the action is ignored.
pub fn raw_score_reward(s: &State, _a: &Action, query: &Query, scorer: Scorer<'_>) -> Result<f64> {
    check_unit(query)?;
    scorer.score(&config_of(s), query)
}

fn check_unit(query: &Query) -> Result<()> {
    if query.embedding.is_unit() {
        Ok(())
    } else {
        Err(Error::ConfigInvalid(format!("query {:?} is not unit-norm", query.name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;

    fn query(seed: u64) -> Query {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        Query {
            name: "q".into(),
            embedding: normalize(&raw).unwrap(),
        }
    }

    #[test]
    fn gcrl_reward_formula_and_fixed_point() {
        let env = Env::default();
        let s = env.reset(3);
        let a = Action::from_slice(&[0.5, -0.2, 0.1, 0.9, 1.0]);
        let goal = Configuration::default_pose();
        let next = env.step(&s, &a).unwrap();
        let r = gcrl_reward(&env, &s, &a, &goal).unwrap();
        assert_eq!(r, s.config.distance(&goal) - next.config.distance(&goal));

        let rest = State {
            config: goal,
            velocities: [0.0; CONFIG_DIM],
            timestep: 0,
        };
        assert_eq!(gcrl_reward(&env, &rest, &Action::ZERO, &goal).unwrap(), 0.0);
        let over = State { timestep: 100, ..rest };
        assert!(matches!(gcrl_reward(&env, &over, &Action::ZERO, &goal), Err(Error::EpisodeOver { .. })));
    }

    #[test]
    fn score_rewards_are_consistent() {
        let env = Env::default();
        let enc = Encoder::default_views(0);
        let model = DistilledModel::new(16, 1, 64, 0);
        let q = query(1);
        let rest = State {
            config: Configuration::default_pose(),
            velocities: [0.0; CONFIG_DIM],
            timestep: 0,
        };
        for scorer in [Scorer::Exact(&enc), Scorer::Distilled(&model)] {
            assert_eq!(vlm_reward(&env, &rest, &Action::ZERO, &q, scorer).unwrap(), 0.0);
            let s = env.reset(5);
            let a = Action::from_slice(&[1.0, 1.0, -1.0, 0.0, 0.0]);
            let next = env.step(&s, &a).unwrap();
            let diff = vlm_reward(&env, &s, &a, &q, scorer).unwrap();
            let minuend = raw_score_reward(&next, &Action::ZERO, &q, scorer).unwrap();
            let sub = raw_score_reward(&s, &a, &q, scorer).unwrap();
            assert!((diff - (minuend - sub)).abs() < 1e-12);
        }
        let mut bad = q.clone();
        bad.embedding = crate::embedding::Embedding::new(vec![0.5; 64]).unwrap();
        assert!(vlm_reward(&env, &rest, &Action::ZERO, &bad, Scorer::Exact(&enc)).is_err());
    }

    #[test]
    fn observation_is_bounded() {
        let env = Env::default();
        let o = observe(&env.reset(0), env.horizon());
        assert!(o.iter().all(|v| v.abs() <= OBS_CLIP));
        assert_eq!(o[OBS_DIM - 1], 0.0);
    }
}
