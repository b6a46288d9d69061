use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::DEFAULT_DIM;
use crate::env::{ACTION_DIM, CONFIG_DIM};
use crate::error::{Error, Result};
use crate::nn::{read_tensors, write_tensors, Mlp, MlpCache};

use super::OBS_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Conditioned on a goal configuration.
    Gcrl,
    /// Conditioned on a query embedding.
    Mtrl,
    /// Unconditioned, one task per agent.
    Strl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub cond_dim: usize,
    /// Task encoder widths, the last one being the task embedding width.
    pub task_widths: Vec<usize>,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind, query_dim: usize) -> Self {
        let cond_dim = match kind {
            PolicyKind::Gcrl => CONFIG_DIM,
            PolicyKind::Mtrl => query_dim,
            PolicyKind::Strl => 0,
        };
        Self {
            kind,
            cond_dim,
            task_widths: if cond_dim == 0 { vec![] } else { vec![64, 16] },
            hidden: vec![64, 64],
            log_std_init: -0.5,
        }
    }

    pub fn gcrl() -> Self {
        Self::new(PolicyKind::Gcrl, DEFAULT_DIM)
    }

    fn task_dim(&self) -> usize {
        self.task_widths.last().copied().unwrap_or(0)
    }
}

/// Shared task encoder feeding separate Gaussian-policy and value heads.
/// The action standard deviation is a learned, state-independent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub spec: PolicySpec,
    pub task: Option<Mlp>,
    pub pi: Mlp,
    pub v: Mlp,
    /// `1 × ACTION_DIM`.
    pub log_std: Array2<f64>,
}

pub(crate) struct PolicyCache {
    task: Option<MlpCache>,
    pi: MlpCache,
    v: MlpCache,
}

/// Outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub mean: Array2<f64>,
    pub value: Array1<f64>,
}

impl Policy {
    pub fn new(spec: PolicySpec, seed: u64) -> Result<Self> {
        if spec.hidden.is_empty() || (spec.cond_dim > 0) == spec.task_widths.is_empty() {
            return Err(Error::ConfigInvalid("policy widths do not match its conditioning".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = (spec.cond_dim > 0).then(|| {
            let mut sizes = vec![spec.cond_dim];
            sizes.extend(&spec.task_widths);
            Mlp::new(&sizes, 1.0, &mut rng)
        });
        let head = |out: usize, gain: f64, rng: &mut ChaCha8Rng| {
            let mut sizes = vec![OBS_DIM + spec.task_dim()];
            sizes.extend(&spec.hidden);
            sizes.push(out);
            Mlp::new(&sizes, gain, rng)
        };
        let pi = head(ACTION_DIM, 0.01, &mut rng);
        let v = head(1, 1.0, &mut rng);
        let log_std = Array2::from_elem((1, ACTION_DIM), spec.log_std_init);
        Ok(Self {
            spec,
            task,
            pi,
            v,
            log_std,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.spec.kind
    }

    pub fn cond_dim(&self) -> usize {
        self.spec.cond_dim
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Task encoder, policy head, value head, then `log_std`.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut v = Vec::new();
        if let Some(t) = &self.task {
            v.extend(t.params());
        }
        v.extend(self.pi.params());
        v.extend(self.v.params());
        v.push(&self.log_std);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = Vec::new();
        if let Some(t) = &mut self.task {
            v.extend(t.params_mut());
        }
        v.extend(self.pi.params_mut());
        v.extend(self.v.params_mut());
        v.push(&mut self.log_std);
        v
    }

    fn head_input(&self, obs: &Array2<f64>, cond: &Array2<f64>) -> (Array2<f64>, Option<MlpCache>) {
        match &self.task {
            Some(t) => {
                let (z, c) = t.forward_cached(cond);
                (concatenate(Axis(1), &[obs.view(), z.view()]).expect("row counts match"), Some(c))
            }
            None => (obs.clone(), None),
        }
    }

    fn check(&self, obs: &Array2<f64>, cond: &Array2<f64>) -> Result<()> {
        if obs.ncols() != OBS_DIM {
            return Err(Error::DimensionMismatch {
                expected: OBS_DIM,
                got: obs.ncols(),
            });
        }
        if self.cond_dim() > 0 && (cond.ncols() != self.cond_dim() || cond.nrows() != obs.nrows()) {
            return Err(Error::DimensionMismatch {
                expected: self.cond_dim(),
                got: cond.ncols(),
            });
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, obs: &Array2<f64>, cond: &Array2<f64>) -> (PolicyOutput, PolicyCache) {
        let (x, task) = self.head_input(obs, cond);
        let (mean, pi) = self.pi.forward_cached(&x);
        let (value, v) = self.v.forward_cached(&x);
        (
            PolicyOutput {
                mean,
                value: value.column(0).to_owned(),
            },
            PolicyCache { task, pi, v },
        )
    }

    /// Action means and state values for a batch. `cond` is ignored for
    /// unconditioned policies.
    pub fn forward(&self, obs: &Array2<f64>, cond: &Array2<f64>) -> Result<PolicyOutput> {
        self.check(obs, cond)?;
        Ok(self.forward_cached(obs, cond).0)
    }

    /// Parameter gradients in [`Policy::params`] order, given gradients
    /// with respect to the action means, the values and `log_std`.
    pub(crate) fn backward(
        &self,
        cache: &PolicyCache,
        d_mean: &Array2<f64>,
        d_value: &Array1<f64>,
        d_log_std: Array2<f64>,
    ) -> Vec<Array2<f64>> {
        let need_input = self.task.is_some();
        let (g_pi, dx_pi) = self.pi.backward(&cache.pi, d_mean, need_input);
        let dv = d_value.clone().insert_axis(Axis(1));
        let (g_v, dx_v) = self.v.backward(&cache.v, &dv, need_input);
        let mut grads = Vec::new();
        if let (Some(t), Some(tc)) = (&self.task, &cache.task) {
            let dx = dx_pi.expect("requested") + dx_v.expect("requested");
            let dz = dx.slice(s![.., OBS_DIM..]).to_owned();
            let (g_t, _) = t.backward(tc, &dz, false);
            grads.extend(g_t);
        }
        grads.extend(g_pi);
        grads.extend(g_v);
        grads.push(d_log_std);
        grads
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(path, &self.params())
    }

    /// Loads a checkpoint, inferring the kind and widths from tensor shapes.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(read_tensors(path)?)
    }

    pub fn from_tensors(mut t: Vec<Array2<f64>>) -> Result<Self> {
        let bad = |m: &str| Error::CountMismatch(format!("policy checkpoint: {m}"));
        let log_std = t.pop().ok_or_else(|| bad("empty"))?;
        if log_std.dim() != (1, ACTION_DIM) {
            return Err(bad("log_std shape"));
        }
        // Heads are two equally deep MLPs; whatever precedes them is the
        // task encoder.
        let (task_t, heads) = match t.len() {
            12 => (vec![], t),
            n if n > 12 && (n - 12) % 2 == 0 => {
                let heads = t.split_off(n - 12);
                (t, heads)
            }
            _ => return Err(bad("unexpected tensor count")),
        };
        let mut heads = heads;
        let v_t = heads.split_off(6);
        let task = if task_t.is_empty() {
            None
        } else {
            Some(Mlp::from_tensors(task_t).ok_or_else(|| bad("task encoder shapes"))?)
        };
        let pi = Mlp::from_tensors(heads).ok_or_else(|| bad("policy head shapes"))?;
        let v = Mlp::from_tensors(v_t).ok_or_else(|| bad("value head shapes"))?;
        let task_dim = task.as_ref().map_or(0, Mlp::out_dim);
        if pi.in_dim() != OBS_DIM + task_dim || v.in_dim() != pi.in_dim() || pi.out_dim() != ACTION_DIM || v.out_dim() != 1 {
            return Err(bad("head widths"));
        }
        let cond_dim = task.as_ref().map_or(0, Mlp::in_dim);
        let kind = match cond_dim {
            0 => PolicyKind::Strl,
            CONFIG_DIM => PolicyKind::Gcrl,
            _ => PolicyKind::Mtrl,
        };
        let spec = PolicySpec {
            kind,
            cond_dim,
            task_widths: task.as_ref().map_or(vec![], |m| m.layers.iter().map(|l| l.fan_out()).collect()),
            hidden: pi.layers[..pi.layers.len() - 1].iter().map(|l| l.fan_out()).collect(),
            log_std_init: log_std[[0, 0]],
        };
        Ok(Self {
            spec,
            task,
            pi,
            v,
            log_std,
        })
    }
}
