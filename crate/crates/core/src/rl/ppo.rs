use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::Query;
use crate::env::{config_of, Action, Configuration, Env, State, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamHyper, AdamState};
use crate::par::{self, Exec};

use super::{observe, Policy, PolicyKind, PolicySpec, RewardSpec, Task, OBS_DIM};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyper {
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    /// Initial learning rate, annealed linearly to zero over training.
    pub lr: f64,
    pub max_grad_norm: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub weight_decay: f64,
    /// Environment steps collected per update, split evenly over the
    /// parallel environments.
    pub update_timestep: usize,
    /// Rows per gradient step. The default gives two minibatches per epoch.
    pub minibatch: usize,
    pub num_envs: usize,
    pub total_steps: usize,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.999,
            gae_lambda: 0.95,
            epochs: 10,
            lr: 5e-4,
            max_grad_norm: 0.5,
            entropy_coef: 0.025,
            value_coef: 0.5,
            weight_decay: 0.01,
            update_timestep: 8192,
            minibatch: 4096,
            num_envs: 64,
            total_steps: 2_000_000,
        }
    }
}

impl PpoHyper {
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            total_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("ppo: {m}")));
        let positive = [self.clip, self.gamma, self.gae_lambda, self.lr, self.max_grad_norm];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("clip, gamma, gae_lambda, lr and max_grad_norm must be positive");
        }
        if self.clip >= 1.0 || self.gamma > 1.0 || self.gae_lambda > 1.0 {
            return bad("clip must be below 1, gamma and gae_lambda at most 1");
        }
        if [self.entropy_coef, self.value_coef, self.weight_decay].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("coefficients must be non-negative");
        }
        if self.epochs == 0 || self.num_envs == 0 || self.minibatch == 0 || self.update_timestep == 0 {
            return bad("epochs, num_envs, minibatch and update_timestep must be positive");
        }
        if !self.update_timestep.is_multiple_of(self.num_envs) {
            return bad("update_timestep must be a multiple of num_envs");
        }
        if self.minibatch > self.update_timestep {
            return bad("minibatch exceeds update_timestep");
        }
        Ok(())
    }

    pub fn updates(&self) -> usize {
        self.total_steps / self.update_timestep
    }
}

/// Where each training episode's task comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    /// Goal configurations, drawn uniformly.
    Goals(Vec<Configuration>),
    /// Queries, drawn uniformly.
    Queries(Vec<Query>),
    /// One fixed query for a single-task agent.
    Single(Query),
}

impl TaskSource {
    pub fn kind(&self) -> PolicyKind {
        match self {
            TaskSource::Goals(_) => PolicyKind::Gcrl,
            TaskSource::Queries(_) => PolicyKind::Mtrl,
            TaskSource::Single(_) => PolicyKind::Strl,
        }
    }

    fn query_dim(&self) -> usize {
        match self {
            TaskSource::Goals(_) => 0,
            TaskSource::Queries(q) => q.first().map_or(0, Query::dim),
            TaskSource::Single(q) => q.dim(),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Task {
        match self {
            TaskSource::Goals(g) => Task::Goal(g[rng.random_range(0..g.len())]),
            TaskSource::Queries(q) => Task::Query(q[rng.random_range(0..q.len())].clone()),
            TaskSource::Single(q) => Task::Fixed(q.clone()),
        }
    }

    fn validate(&self, reward: &RewardSpec<'_>) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        match (self, reward) {
            (TaskSource::Goals(g), RewardSpec::GoalDistance) => {
                if g.is_empty() {
                    return bad("no training goals".into());
                }
                g.iter().try_for_each(Configuration::check_admissible)
            }
            (TaskSource::Queries(qs), RewardSpec::ScoreDifference(s) | RewardSpec::RawScore(s)) => {
                if qs.is_empty() {
                    return bad("no training queries".into());
                }
                for q in qs {
                    if q.dim() != s.dim() || !q.embedding.is_unit() {
                        return bad(format!("query {:?} is not a unit {}-vector", q.name, s.dim()));
                    }
                }
                Ok(())
            }
            (TaskSource::Single(q), RewardSpec::ScoreDifference(s) | RewardSpec::RawScore(s)) => {
                if q.dim() != s.dim() || !q.embedding.is_unit() {
                    return bad(format!("query {:?} is not a unit {}-vector", q.name, s.dim()));
                }
                Ok(())
            }
            _ => bad(format!("{:?} tasks do not match the reward", self.kind())),
        }
    }
}

/// Generalized advantage estimates and value targets for one environment's
/// step sequence. `dones[t]` marks a terminal transition at step `t`;
/// `last_value` bootstraps the step after the final one.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "gae inputs must align");
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let nonterminal = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 == n { last_value } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_value * nonterminal - values[t];
        running = delta + gamma * lambda * nonterminal * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Flat training buffer consumed by [`ppo_update`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    /// `rows × cond_dim`; zero columns for unconditioned policies.
    pub cond: Array2<f64>,
    /// Unclamped sampled actions.
    pub actions: Array2<f64>,
    pub logp: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            obs: self.obs.select(Axis(0), idx),
            cond: self.cond.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            logp: self.logp.select(Axis(0), idx),
            advantages: self.advantages.select(Axis(0), idx),
            returns: self.returns.select(Axis(0), idx),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    pub lr: f64,
    /// Mean undiscounted return of episodes finished during collection.
    pub mean_episode_return: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub env_steps: usize,
    pub episodes: usize,
    pub updates: Vec<UpdateStats>,
}

/// Log-density of `a` under a diagonal Gaussian, per row.
fn log_prob(mean: &Array2<f64>, log_std: &Array2<f64>, actions: &Array2<f64>) -> Array1<f64> {
    let ls = log_std.row(0);
    Array1::from_iter(mean.outer_iter().zip(actions.outer_iter()).map(|(m, a)| {
        (0..ACTION_DIM)
            .map(|k| {
                let z = (a[k] - m[k]) / ls[k].exp();
                -0.5 * z * z - ls[k] - 0.5 * LN_2PI
            })
            .sum::<f64>()
    }))
}

/// Clipped-surrogate PPO epochs over one batch. Advantages are normalized
/// per minibatch; the value loss is unclipped.
pub fn ppo_update<R: Rng>(
    policy: &mut Policy,
    adam: &mut AdamState,
    batch: &Batch,
    hyper: &PpoHyper,
    lr: f64,
    rng: &mut R,
) -> UpdateStats {
    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats {
        lr,
        ..UpdateStats::default()
    };
    let mut count = 0usize;
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for idx in order.chunks(hyper.minibatch) {
            let mb = batch.select(idx);
            let b = idx.len() as f64;
            let (out, cache) = policy.forward_cached(&mb.obs, &mb.cond);
            let logp = log_prob(&out.mean, &policy.log_std, &mb.actions);

            let mean_adv = mb.advantages.mean().unwrap_or(0.0);
            let std_adv = mb.advantages.std(0.0);
            let adv = mb.advantages.mapv(|a| (a - mean_adv) / (std_adv + 1e-8));

            let sigma2 = policy.log_std.mapv(|s| (2.0 * s).exp());
            let mut d_mean = Array2::zeros(out.mean.raw_dim());
            let mut d_log_std = Array2::from_elem((1, ACTION_DIM), -hyper.entropy_coef);
            let (mut ploss, mut kl, mut clipped) = (0.0, 0.0, 0.0);
            for i in 0..idx.len() {
                let log_ratio = logp[i] - mb.logp[i];
                let ratio = log_ratio.exp();
                let a = adv[i];
                let clipped_ratio = ratio.clamp(1.0 - hyper.clip, 1.0 + hyper.clip);
                ploss -= (ratio * a).min(clipped_ratio * a) / b;
                kl += ((ratio - 1.0) - log_ratio) / b;
                let inactive = (a > 0.0 && ratio > 1.0 + hyper.clip) || (a < 0.0 && ratio < 1.0 - hyper.clip);
                if inactive {
                    clipped += 1.0 / b;
                    continue;
                }
                // d(-ratio * a / b) / d logp
                let g = -a * ratio / b;
                if g == 0.0 {
                    continue;
                }
                for k in 0..ACTION_DIM {
                    let diff = mb.actions[[i, k]] - out.mean[[i, k]];
                    d_mean[[i, k]] = g * diff / sigma2[[0, k]];
                    d_log_std[[0, k]] += g * (diff * diff / sigma2[[0, k]] - 1.0);
                }
            }
            let verr = &out.value - &mb.returns;
            let vloss = verr.mapv(|e| e * e).sum() / b;
            let d_value = verr.mapv(|e| hyper.value_coef * 2.0 * e / b);

            let mut grads = policy.backward(&cache, &d_mean, &d_value, d_log_std);
            clip_grad_norm(&mut grads, hyper.max_grad_norm);
            adam.step_tensors(policy.params_mut(), &grads, lr);

            let entropy = policy.log_std.sum() + 0.5 * ACTION_DIM as f64 * (1.0 + LN_2PI);
            stats.policy_loss += ploss;
            stats.value_loss += vloss;
            stats.entropy += entropy;
            stats.approx_kl += kl;
            stats.clip_fraction += clipped;
            count += 1;
        }
    }
    if count > 0 {
        let c = count as f64;
        stats.policy_loss /= c;
        stats.value_loss /= c;
        stats.entropy /= c;
        stats.approx_kl /= c;
        stats.clip_fraction /= c;
    }
    stats
}

struct Slot {
    state: State,
    task: Task,
    cond: Vec<f64>,
    /// Score of the current configuration, for score-based rewards.
    score: f64,
    episode_return: f64,
}

struct Collector<'a> {
    env: &'a Env,
    reward: RewardSpec<'a>,
    tasks: &'a TaskSource,
    slots: Vec<Slot>,
    reset_rng: ChaCha8Rng,
    finished: Vec<f64>,
    episodes: usize,
}

impl<'a> Collector<'a> {
    fn new(env: &'a Env, reward: RewardSpec<'a>, tasks: &'a TaskSource, num_envs: usize, seed: u64) -> Result<Self> {
        let mut c = Self {
            env,
            reward,
            tasks,
            slots: Vec::with_capacity(num_envs),
            reset_rng: ChaCha8Rng::seed_from_u64(seed),
            finished: Vec::new(),
            episodes: 0,
        };
        for _ in 0..num_envs {
            let slot = c.fresh_slot();
            c.slots.push(slot);
        }
        let all: Vec<usize> = (0..num_envs).collect();
        c.refresh_scores(&all)?;
        Ok(c)
    }

    fn fresh_slot(&mut self) -> Slot {
        let env_seed = self.reset_rng.next_u64();
        let task = self.tasks.sample(&mut self.reset_rng);
        Slot {
            state: self.env.reset(env_seed),
            cond: task.conditioning(),
            task,
            score: 0.0,
            episode_return: 0.0,
        }
    }

    fn score_of(&self, configs: &[Configuration], slots: &[usize]) -> Result<Vec<f64>> {
        match self.reward {
            RewardSpec::GoalDistance => Ok(vec![0.0; configs.len()]),
            RewardSpec::ScoreDifference(s) | RewardSpec::RawScore(s) => {
                let queries: Vec<Query> = slots
                    .iter()
                    .map(|&i| self.slots[i].task.query().expect("validated").clone())
                    .collect();
                s.scores(configs, &queries)
            }
        }
    }

    fn refresh_scores(&mut self, which: &[usize]) -> Result<()> {
        if which.is_empty() {
            return Ok(());
        }
        let configs: Vec<Configuration> = which.iter().map(|&i| self.slots[i].state.config).collect();
        let scores = self.score_of(&configs, which)?;
        for (&i, s) in which.iter().zip(scores) {
            self.slots[i].score = s;
        }
        Ok(())
    }

    fn inputs(&self, cond_dim: usize) -> (Array2<f64>, Array2<f64>) {
        let e = self.slots.len();
        let horizon = self.env.horizon();
        let mut obs = Array2::zeros((e, OBS_DIM));
        let mut cond = Array2::zeros((e, cond_dim));
        for (i, s) in self.slots.iter().enumerate() {
            obs.row_mut(i).assign(&Array1::from(observe(&s.state, horizon).to_vec()));
            if cond_dim > 0 {
                cond.row_mut(i).assign(&Array1::from(s.cond.clone()));
            }
        }
        (obs, cond)
    }

    /// Steps every environment once; returns rewards and terminal flags.
    fn step(&mut self, actions: &Array2<f64>) -> Result<(Vec<f64>, Vec<bool>)> {
        let env = self.env;
        let next: Vec<Result<State>> = par::map_indexed(Exec::default(), self.slots.len(), |i| {
            env.step(&self.slots[i].state, &Action::from_slice(actions.row(i).as_slice().expect("row-major")))
        });
        let next: Vec<State> = next.into_iter().collect::<Result<_>>()?;
        let all: Vec<usize> = (0..self.slots.len()).collect();
        let next_configs: Vec<Configuration> = next.iter().map(config_of).collect();
        let next_scores = self.score_of(&next_configs, &all)?;

        let mut rewards = Vec::with_capacity(next.len());
        let mut dones = Vec::with_capacity(next.len());
        let mut resets = Vec::new();
        for (i, (ns, sc)) in next.into_iter().zip(next_scores).enumerate() {
            let slot = &mut self.slots[i];
            let r = match (&self.reward, &slot.task) {
                (RewardSpec::GoalDistance, Task::Goal(g)) => slot.state.config.distance(g) - ns.config.distance(g),
                (RewardSpec::ScoreDifference(_), _) => sc - slot.score,
                (RewardSpec::RawScore(_), _) => slot.score,
                _ => unreachable!("validated task source"),
            };
            slot.state = ns;
            slot.score = sc;
            slot.episode_return += r;
            let done = ns.timestep >= env.horizon();
            if done {
                self.finished.push(slot.episode_return);
                self.episodes += 1;
                resets.push(i);
            }
            rewards.push(r);
            dones.push(done);
        }
        for &i in &resets {
            self.slots[i] = self.fresh_slot();
        }
        self.refresh_scores(&resets)?;
        Ok((rewards, dones))
    }
}

/// Trains a fresh policy of the kind implied by `tasks` with PPO.
/// Deterministic given `seed`.
pub fn ppo_train(
    env: &Env,
    reward: RewardSpec<'_>,
    tasks: &TaskSource,
    hyper: &PpoHyper,
    seed: u64,
) -> Result<(Policy, TrainLog)> {
    hyper.validate()?;
    tasks.validate(&reward)?;
    let spec = PolicySpec::new(tasks.kind(), tasks.query_dim());
    let mut policy = Policy::new(spec, seed)?;
    let mut log = TrainLog::default();
    let updates = hyper.updates();
    if updates == 0 {
        return Ok((policy, log));
    }

    let mut adam = AdamState::new(policy.num_params(), AdamHyper::adamw(hyper.weight_decay));
    let mut action_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_0001);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_0002);
    let mut collector = Collector::new(env, reward, tasks, hyper.num_envs, seed ^ 0xA5A5_0003)?;
    let e = hyper.num_envs;
    let steps = hyper.update_timestep / e;
    let cond_dim = policy.cond_dim();

    for u in 0..updates {
        let lr = hyper.lr * (1.0 - u as f64 / updates as f64);
        let rows = steps * e;
        let mut obs = Array2::zeros((rows, OBS_DIM));
        let mut cond = Array2::zeros((rows, cond_dim));
        let mut actions = Array2::zeros((rows, ACTION_DIM));
        let mut logp = Array1::zeros(rows);
        let mut values = vec![0.0; rows];
        let mut rewards = vec![0.0; rows];
        let mut dones = vec![false; rows];
        collector.finished.clear();

        for t in 0..steps {
            let (o, c) = collector.inputs(cond_dim);
            let out = policy.forward(&o, &c)?;
            let std = policy.log_std.mapv(f64::exp);
            let mut a = out.mean.clone();
            for mut row in a.outer_iter_mut() {
                for k in 0..ACTION_DIM {
                    let eps: f64 = action_rng.sample(StandardNormal);
                    row[k] += std[[0, k]] * eps;
                }
            }
            let lp = log_prob(&out.mean, &policy.log_std, &a);
            let (r, d) = collector.step(&a)?;
            let base = t * e;
            obs.slice_mut(ndarray::s![base..base + e, ..]).assign(&o);
            cond.slice_mut(ndarray::s![base..base + e, ..]).assign(&c);
            actions.slice_mut(ndarray::s![base..base + e, ..]).assign(&a);
            logp.slice_mut(ndarray::s![base..base + e]).assign(&lp);
            values[base..base + e].copy_from_slice(out.value.as_slice().expect("contiguous"));
            rewards[base..base + e].copy_from_slice(&r);
            dones[base..base + e].copy_from_slice(&d);
        }
        let (o, c) = collector.inputs(cond_dim);
        let last = policy.forward(&o, &c)?.value;

        let mut advantages = Array1::zeros(rows);
        let mut returns = Array1::zeros(rows);
        for env_i in 0..e {
            let pick = |v: &[f64]| (0..steps).map(|t| v[t * e + env_i]).collect::<Vec<_>>();
            let d: Vec<bool> = (0..steps).map(|t| dones[t * e + env_i]).collect();
            let (adv, ret) = gae(&pick(&rewards), &pick(&values), &d, last[env_i], hyper.gamma, hyper.gae_lambda);
            for t in 0..steps {
                advantages[t * e + env_i] = adv[t];
                returns[t * e + env_i] = ret[t];
            }
        }
        let batch = Batch {
            obs,
            cond,
            actions,
            logp,
            advantages,
            returns,
        };
        let mut stats = ppo_update(&mut policy, &mut adam, &batch, hyper, lr, &mut shuffle_rng);
        stats.update = u;
        if !collector.finished.is_empty() {
            stats.mean_episode_return = Some(collector.finished.iter().sum::<f64>() / collector.finished.len() as f64);
        }
        log.updates.push(stats);
        log.env_steps += rows;
    }
    log.episodes = collector.episodes;
    Ok((policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let r = [0.5, -1.0, 2.0, 0.25];
        let v = [0.1, 0.3, -0.2, 0.7];
        let d = [false, false, true, false];
        let (adv, ret) = gae(&r, &v, &d, 0.9, 0.97, 0.0);
        let next = [v[1], v[2], 0.0, 0.9];
        for t in 0..4 {
            let nonterm = if d[t] { 0.0 } else { 1.0 };
            assert!((adv[t] - (r[t] + 0.97 * next[t] * nonterm - v[t])).abs() < 1e-12);
            assert!((ret[t] - (adv[t] + v[t])).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn gae_lambda_one_gamma_one_is_return_minus_value(
            r in prop::collection::vec(-5.0f64..5.0, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = r.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut d = vec![false; r.len()];
            *d.last_mut().unwrap() = true;
            let (adv, _) = gae(&r, &v, &d, 123.0, 1.0, 1.0);
            for t in 0..r.len() {
                let g: f64 = r[t..].iter().sum();
                prop_assert!((adv[t] - (g - v[t])).abs() < 1e-9);
            }
        }
    }

    fn toy_batch(policy: &Policy, n: usize, adv: f64, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = Array2::from_shape_fn((n, OBS_DIM), |_| rng.random_range(-1.0..1.0));
        let cond = Array2::from_shape_fn((n, policy.cond_dim()), |_| rng.random_range(-1.0..1.0));
        let actions = Array2::from_shape_fn((n, ACTION_DIM), |_| rng.random_range(-1.0..1.0));
        let out = policy.forward(&obs, &cond).unwrap();
        let logp = log_prob(&out.mean, &policy.log_std, &actions);
        Batch {
            obs,
            cond,
            actions,
            logp,
            advantages: Array1::from_elem(n, adv),
            returns: Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0))),
        }
    }

    #[test]
    fn zero_surrogate_gradient_leaves_params_unchanged() {
        let mut policy = Policy::new(PolicySpec::gcrl(), 4).unwrap();
        let before = policy.clone();
        let batch = toy_batch(&policy, 64, 0.0, 1);
        let hyper = PpoHyper {
            entropy_coef: 0.0,
            value_coef: 0.0,
            weight_decay: 0.0,
            minibatch: 16,
            update_timestep: 64,
            ..PpoHyper::default()
        };
        let mut adam = AdamState::new(policy.num_params(), AdamHyper::adamw(0.0));
        ppo_update(&mut policy, &mut adam, &batch, &hyper, 1e-3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(policy, before);
    }

    /// Finite-difference check of the analytic PPO gradient on a single
    /// minibatch with a nonzero surrogate.
    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let policy = Policy::new(PolicySpec::new(PolicyKind::Mtrl, 8), 9).unwrap();
        let mut batch = toy_batch(&policy, 12, 0.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        batch.advantages = Array1::from_iter((0..12).map(|_| rng.random_range(-1.0..1.0)));
        let hyper = PpoHyper {
            clip: 0.9,
            ..PpoHyper::default()
        };
        let loss = |p: &Policy| {
            let out = p.forward(&batch.obs, &batch.cond).unwrap();
            let lp = log_prob(&out.mean, &p.log_std, &batch.actions);
            let m = batch.advantages.mean().unwrap();
            let s = batch.advantages.std(0.0);
            let b = 12.0;
            let mut l = 0.0;
            for i in 0..12 {
                let a = (batch.advantages[i] - m) / (s + 1e-8);
                let ratio = (lp[i] - batch.logp[i]).exp();
                l -= (ratio * a).min(ratio.clamp(1.0 - hyper.clip, 1.0 + hyper.clip) * a) / b;
                let e = out.value[i] - batch.returns[i];
                l += hyper.value_coef * e * e / b;
            }
            l - hyper.entropy_coef * p.log_std.sum()
        };
        // Perturb away from ratio 1 so the gradient is generic.
        let mut p = policy.clone();
        p.log_std.mapv_inplace(|v| v + 0.1);
        let (out, cache) = p.forward_cached(&batch.obs, &batch.cond);
        let lp = log_prob(&out.mean, &p.log_std, &batch.actions);
        let m = batch.advantages.mean().unwrap();
        let s = batch.advantages.std(0.0);
        let sigma2 = p.log_std.mapv(|v| (2.0 * v).exp());
        let mut d_mean = Array2::zeros(out.mean.raw_dim());
        let mut d_ls = Array2::from_elem((1, ACTION_DIM), -hyper.entropy_coef);
        for i in 0..12 {
            let a = (batch.advantages[i] - m) / (s + 1e-8);
            let ratio = (lp[i] - batch.logp[i]).exp();
            assert!(ratio > 1.0 - hyper.clip && ratio < 1.0 + hyper.clip);
            let g = -a * ratio / 12.0;
            for k in 0..ACTION_DIM {
                let diff = batch.actions[[i, k]] - out.mean[[i, k]];
                d_mean[[i, k]] = g * diff / sigma2[[0, k]];
                d_ls[[0, k]] += g * (diff * diff / sigma2[[0, k]] - 1.0);
            }
        }
        let d_value = (&out.value - &batch.returns).mapv(|e| hyper.value_coef * 2.0 * e / 12.0);
        let grads = p.backward(&cache, &d_mean, &d_value, d_ls);
        let h = 1e-6;
        for (ti, g) in grads.iter().enumerate() {
            for (j, &analytic) in g.iter().enumerate().step_by(7) {
                let mut plus = p.clone();
                plus.params_mut()[ti].as_slice_mut().unwrap()[j] += h;
                let mut minus = p.clone();
                minus.params_mut()[ti].as_slice_mut().unwrap()[j] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()), "tensor {ti} entry {j}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn zero_updates_return_initial_params() {
        let env = Env::default();
        let tasks = TaskSource::Goals(vec![Configuration::default_pose()]);
        let hyper = PpoHyper::with_steps(100);
        let (p, log) = ppo_train(&env, RewardSpec::GoalDistance, &tasks, &hyper, 7).unwrap();
        assert_eq!(p, Policy::new(PolicySpec::gcrl(), 7).unwrap());
        assert!(log.updates.is_empty());
    }

    #[test]
    fn mismatched_reward_is_rejected() {
        let env = Env::default();
        let tasks = TaskSource::Goals(vec![Configuration::default_pose()]);
        let enc = crate::env::Encoder::default_views(0);
        let r = ppo_train(&env, RewardSpec::ScoreDifference(super::super::Scorer::Exact(&enc)), &tasks, &PpoHyper::default(), 0);
        assert!(matches!(r, Err(Error::ConfigInvalid(_))));
        let bad = PpoHyper {
            clip: 1.5,
            ..PpoHyper::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn short_training_is_deterministic() {
        let env = Env::default();
        let tasks = TaskSource::Goals(vec![Configuration::default_pose(), crate::env::project(&[1.0, 0.5, 0.0, 0.0, 0.8, 0.2, 0.0]).unwrap()]);
        let hyper = PpoHyper {
            update_timestep: 256,
            minibatch: 128,
            num_envs: 8,
            epochs: 2,
            total_steps: 512,
            ..PpoHyper::default()
        };
        let (a, la) = ppo_train(&env, RewardSpec::GoalDistance, &tasks, &hyper, 11).unwrap();
        let (b, lb) = ppo_train(&env, RewardSpec::GoalDistance, &tasks, &hyper, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.updates.len(), 2);
        assert_eq!(la.env_steps, 512);
        assert_ne!(a, Policy::new(PolicySpec::gcrl(), 11).unwrap());
    }
}
