//! Differentiable surrogate of the exact multiview encoder.
//!
//! A residual MLP: a fixed input featurization, an input projection, `n` blocks of
//! `x + Linear(dropout(GeLU(Linear(BN(x)))))`, and a linear read-out that
//! starts at zero. Outputs are not normalized since targets are multiview
//! means. Gradients with respect to both parameters and inputs are computed
//! by hand.

mod train;

pub use train::{evaluate, train, train_from, DistillHyper, TrainReport};

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::Embedding;
use crate::env::{Configuration, CONFIG_DIM, CUBE_X_LIMITS, JOINT_LIMITS, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, read_tensors, write_tensors, Linear};
use crate::par::{self, Exec};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
/// Rows per parallel work item in batched inference.
const INFER_CHUNK: usize = 512;

/// Per-dimension `(centre, half-range)` used to scale raw configurations
/// into roughly `[-1, 1]`.
fn input_ranges() -> [(f64, f64); CONFIG_DIM] {
    let j = JOINT_LIMITS;
    let mid = |(lo, hi): (f64, f64)| ((lo + hi) / 2.0, (hi - lo) / 2.0);
    [
        mid(j[0]),
        mid(j[1]),
        mid(j[2]),
        mid(j[3]),
        mid(CUBE_X_LIMITS),
        mid((0.0, 2.0)),
        mid((-std::f64::consts::PI, std::f64::consts::PI)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Running normalization statistics, no dropout.
    Infer,
    /// Batch statistics and dropout with a mask drawn from `dropout_seed`.
    Train { dropout: f64, dropout_seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub running_mean: Array2<f64>,
    pub running_var: Array2<f64>,
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledModel {
    /// Subtracted from raw inputs, `1 × 7`.
    pub offset: Array2<f64>,
    /// Multiplies the centred inputs, `1 × 7`.
    pub scale: Array2<f64>,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub output: Linear,
}

struct BlockCache {
    xhat: Array2<f64>,
    inv_std: Array2<f64>,
    normed: Array2<f64>,
    z1: Array2<f64>,
    hidden: Array2<f64>,
    mask: Option<Array2<f64>>,
}

pub(crate) struct Cache {
    raw: Array2<f64>,
    scaled: Array2<f64>,
    blocks: Vec<BlockCache>,
    last: Array2<f64>,
    train: bool,
    /// Batch mean and biased variance per block, train mode only.
    batch_stats: Vec<(Array2<f64>, Array2<f64>)>,
}

/// Width of the fixed featurization: scaled raw inputs, then sine and
/// cosine of the four cumulative link headings and of the cube angle.
/// Every keypoint position is linear in these features.
pub const FEATURES: usize = CONFIG_DIM + 2 * (NUM_JOINTS + 1);

/// Per-row featurization of raw `n × 7` inputs.
fn featurize(x: &Array2<f64>, offset: &Array2<f64>, scale: &Array2<f64>) -> Array2<f64> {
    let mut f = Array2::zeros((x.nrows(), FEATURES));
    for (mut out, row) in f.outer_iter_mut().zip(x.outer_iter()) {
        for j in 0..CONFIG_DIM {
            out[j] = (row[j] - offset[[0, j]]) * scale[[0, j]];
        }
        let mut heading = 0.0;
        for i in 0..=NUM_JOINTS {
            let angle = if i < NUM_JOINTS {
                heading += row[i];
                heading
            } else {
                row[CONFIG_DIM - 1]
            };
            let (s, c) = angle.sin_cos();
            out[CONFIG_DIM + 2 * i] = s;
            out[CONFIG_DIM + 2 * i + 1] = c;
        }
    }
    f
}

/// Pulls a feature-space gradient back to the raw inputs.
fn featurize_backward(x: &Array2<f64>, scale: &Array2<f64>, df: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    for ((mut g, row), d) in dx.outer_iter_mut().zip(x.outer_iter()).zip(df.outer_iter()) {
        for j in 0..CONFIG_DIM {
            g[j] = d[j] * scale[[0, j]];
        }
        // d/dangle of (sin, cos) is (cos, -sin).
        let mut heading = 0.0;
        let mut dheading = [0.0; NUM_JOINTS];
        for (i, dh) in dheading.iter_mut().enumerate() {
            heading += row[i];
            let (s, c) = heading.sin_cos();
            *dh = d[CONFIG_DIM + 2 * i] * c - d[CONFIG_DIM + 2 * i + 1] * s;
        }
        // Joint j moves every heading from j onwards.
        let mut acc = 0.0;
        for j in (0..NUM_JOINTS).rev() {
            acc += dheading[j];
            g[j] += acc;
        }
        let k = CONFIG_DIM + 2 * NUM_JOINTS;
        let (s, c) = row[CONFIG_DIM - 1].sin_cos();
        g[CONFIG_DIM - 1] += d[k] * c - d[k + 1] * s;
    }
    dx
}

/// Stacks configurations as rows of an `n × 7` matrix.
pub fn config_matrix(configs: &[Configuration]) -> Array2<f64> {
    let mut m = Array2::zeros((configs.len(), CONFIG_DIM));
    for (mut row, q) in m.outer_iter_mut().zip(configs) {
        row.iter_mut().zip(q.to_array()).for_each(|(r, v)| *r = v);
    }
    m
}

impl DistilledModel {
    /// Random init. The read-out layer starts at zero, so a fresh model
    /// maps every input to the zero embedding.
    pub fn new(width: usize, blocks: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranges = input_ranges();
        let offset = Array2::from_shape_fn((1, CONFIG_DIM), |(_, j)| ranges[j].0);
        let scale = Array2::from_shape_fn((1, CONFIG_DIM), |(_, j)| 1.0 / ranges[j].1);
        let input = Linear::new(FEATURES, width, 2.0, &mut rng);
        let blocks = (0..blocks)
            .map(|_| Block {
                gamma: Array2::ones((1, width)),
                beta: Array2::zeros((1, width)),
                running_mean: Array2::zeros((1, width)),
                running_var: Array2::ones((1, width)),
                l1: Linear::new(width, width, 2f64.sqrt(), &mut rng),
                l2: Linear::new(width, width, 0.5, &mut rng),
            })
            .collect();
        Self {
            offset,
            scale,
            input,
            blocks,
            output: Linear::zeros(width, dim),
        }
    }

    pub fn width(&self) -> usize {
        self.input.fan_out()
    }

    pub fn dim(&self) -> usize {
        self.output.fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Trainable tensors in a fixed order shared with [`DistilledModel::backward`].
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.input.w, &self.input.b];
        for b in &self.blocks {
            v.extend([&b.gamma, &b.beta, &b.l1.w, &b.l1.b, &b.l2.w, &b.l2.b]);
        }
        v.extend([&self.output.w, &self.output.b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.input.w, &mut self.input.b];
        for b in &mut self.blocks {
            v.extend([
                &mut b.gamma,
                &mut b.beta,
                &mut b.l1.w,
                &mut b.l1.b,
                &mut b.l2.w,
                &mut b.l2.b,
            ]);
        }
        v.extend([&mut self.output.w, &mut self.output.b]);
        v
    }

    fn check_input(x: &Array2<f64>) -> Result<()> {
        if x.ncols() != CONFIG_DIM {
            return Err(Error::DimensionMismatch {
                expected: CONFIG_DIM,
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: &Array2<f64>, mode: Mode) -> (Array2<f64>, Cache) {
        let (train, dropout, mut rng) = match mode {
            Mode::Infer => (false, 0.0, None),
            Mode::Train {
                dropout,
                dropout_seed,
            } => (true, dropout, Some(ChaCha8Rng::seed_from_u64(dropout_seed))),
        };
        let n = x.nrows() as f64;
        let scaled = featurize(x, &self.offset, &self.scale);
        let mut h = self.input.forward(&scaled);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut batch_stats = Vec::new();
        for b in &self.blocks {
            let (mean, var) = if train {
                let mean = h.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
                let centred = &h - &mean;
                let var = (&centred * &centred).sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
                (mean, var)
            } else {
                (b.running_mean.clone(), b.running_var.clone())
            };
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = (&h - &mean) * &inv_std;
            let normed = &xhat * &b.gamma + &b.beta;
            let z1 = b.l1.forward(&normed);
            let mut hidden = z1.mapv(gelu);
            let mask = match rng.as_mut() {
                Some(rng) if dropout > 0.0 => {
                    let keep = 1.0 / (1.0 - dropout);
                    let m = Array2::from_shape_simple_fn(hidden.raw_dim(), || {
                        if rng.random::<f64>() < dropout {
                            0.0
                        } else {
                            keep
                        }
                    });
                    hidden *= &m;
                    Some(m)
                }
                _ => None,
            };
            h = h + b.l2.forward(&hidden);
            if train {
                batch_stats.push((mean, var));
            }
            caches.push(BlockCache {
                xhat,
                inv_std,
                normed,
                z1,
                hidden,
                mask,
            });
        }
        let out = self.output.forward(&h);
        (
            out,
            Cache {
                raw: x.clone(),
                scaled,
                blocks: caches,
                last: h,
                train,
                batch_stats,
            },
        )
    }

    /// Reverse pass for upstream gradient `dy` (`n × d`). Returns parameter
    /// gradients in [`DistilledModel::params`] order when `want_params`, and
    /// the gradient with respect to the raw `n × 7` input.
    pub(crate) fn backward(
        &self,
        cache: &Cache,
        dy: &Array2<f64>,
        want_params: bool,
    ) -> (Vec<Array2<f64>>, Array2<f64>) {
        let n = dy.nrows() as f64;
        let mut block_grads: Vec<[Array2<f64>; 6]> = Vec::new();
        let (out_w, out_b) = if want_params {
            let (dw, db) = self.output.backward_params(&cache.last, dy);
            (Some(dw), Some(db))
        } else {
            (None, None)
        };
        let mut dh = dy.dot(&self.output.w.t());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut dhidden = dh.dot(&b.l2.w.t());
            if let Some(m) = &c.mask {
                dhidden *= m;
            }
            let mut dz1 = dhidden;
            dz1.zip_mut_with(&c.z1, |g, &z| *g *= gelu_grad(z));
            let dnormed = dz1.dot(&b.l1.w.t());
            if want_params {
                let (dw2, db2) = b.l2.backward_params(&c.hidden, &dh);
                let (dw1, db1) = b.l1.backward_params(&c.normed, &dz1);
                let dgamma = (&dnormed * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbeta = dnormed.sum_axis(Axis(0)).insert_axis(Axis(0));
                block_grads.push([dgamma, dbeta, dw1, db1, dw2, db2]);
            }
            let dxhat = dnormed * &b.gamma;
            let dx = if cache.train {
                let s1 = dxhat.sum_axis(Axis(0)).insert_axis(Axis(0));
                let s2 = (&dxhat * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                (dxhat - &(s1 / n) - &(&c.xhat * &(s2 / n))) * &c.inv_std
            } else {
                dxhat * &c.inv_std
            };
            dh += &dx;
        }
        let mut grads = Vec::new();
        if want_params {
            let (dw, db) = self.input.backward_params(&cache.scaled, &dh);
            grads.push(dw);
            grads.push(db);
            for g in block_grads.into_iter().rev() {
                grads.extend(g);
            }
            grads.push(out_w.unwrap());
            grads.push(out_b.unwrap());
        }
        let dx = featurize_backward(&cache.raw, &self.scale, &dh.dot(&self.input.w.t()));
        (grads, dx)
    }

    /// Batch forward pass over raw `n × 7` inputs.
    pub fn forward_batch(&self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        Self::check_input(x)?;
        Ok(self.forward_cached(x, mode).0)
    }

    /// Inference-mode embedding of one configuration.
    pub fn forward(&self, q: &Configuration) -> Result<Embedding> {
        let x = config_matrix(std::slice::from_ref(q));
        let out = self.forward_batch(&x, Mode::Infer)?;
        Embedding::new(out.row(0).to_vec())
    }

    /// Inference over many configurations, split into row chunks under `exec`.
    pub fn predict_with(&self, configs: &[Configuration], exec: Exec) -> Result<Array2<f64>> {
        let x = config_matrix(configs);
        Self::check_input(&x)?;
        let parts = par::map_chunks(exec, configs.len(), INFER_CHUNK, |r| {
            self.forward_cached(&x.slice(ndarray::s![r, ..]).to_owned(), Mode::Infer).0
        });
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.dim())));
        }
        Ok(ndarray::concatenate(Axis(0), &views).expect("chunks share width"))
    }

    pub fn predict(&self, configs: &[Configuration]) -> Result<Array2<f64>> {
        self.predict_with(configs, Exec::default())
    }

    /// Gradients of `upstream · forward(q)` in inference mode, with respect
    /// to the parameters (in [`DistilledModel::params`] order) and to `q`.
    pub fn grad(&self, q: &Configuration, upstream: &[f64]) -> Result<(Vec<Array2<f64>>, [f64; CONFIG_DIM])> {
        let x = config_matrix(std::slice::from_ref(q));
        let dy = self.upstream_matrix(upstream, 1)?;
        Self::check_input(&x)?;
        let (_, cache) = self.forward_cached(&x, Mode::Infer);
        let (grads, dx) = self.backward(&cache, &dy, true);
        let mut g = [0.0; CONFIG_DIM];
        g.iter_mut().zip(dx.row(0)).for_each(|(a, b)| *a = *b);
        Ok((grads, g))
    }

    fn upstream_matrix(&self, upstream: &[f64], rows: usize) -> Result<Array2<f64>> {
        if upstream.len() != self.dim() * rows {
            return Err(Error::DimensionMismatch {
                expected: self.dim() * rows,
                got: upstream.len(),
            });
        }
        if upstream.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Array2::from_shape_vec((rows, self.dim()), upstream.to_vec()).expect("length checked"))
    }

    /// Inference outputs together with the input gradients of
    /// `Σ_i upstream_i · forward(x_i)`, one row per input.
    pub fn output_and_input_grad(&self, x: &Array2<f64>, upstream: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        Self::check_input(x)?;
        if upstream.dim() != (x.nrows(), self.dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: upstream.ncols(),
            });
        }
        let (out, cache) = self.forward_cached(x, Mode::Infer);
        let (_, dx) = self.backward(&cache, upstream, false);
        Ok((out, dx))
    }

    /// Inference outputs and input gradients, where the upstream gradient
    /// is computed from the outputs by `upstream_of`.
    pub fn input_grad_with<F>(&self, x: &Array2<f64>, upstream_of: F) -> Result<(Array2<f64>, Array2<f64>)>
    where
        F: FnOnce(&Array2<f64>) -> Array2<f64>,
    {
        Self::check_input(x)?;
        let (out, cache) = self.forward_cached(x, Mode::Infer);
        let dy = upstream_of(&out);
        let (_, dx) = self.backward(&cache, &dy, false);
        Ok((out, dx))
    }

    pub(crate) fn update_running_stats(&mut self, cache: &Cache, rows: usize) {
        let unbias = if rows > 1 {
            rows as f64 / (rows as f64 - 1.0)
        } else {
            1.0
        };
        for (b, (mean, var)) in self.blocks.iter_mut().zip(&cache.batch_stats) {
            b.running_mean = &b.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
            b.running_var = &b.running_var * (1.0 - BN_MOMENTUM) + &(var * (unbias * BN_MOMENTUM));
        }
    }

    /// Every tensor, including scaling and running statistics, in file order.
    fn all_tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.offset, &self.scale, &self.input.w, &self.input.b];
        for b in &self.blocks {
            v.extend([
                &b.gamma,
                &b.beta,
                &b.running_mean,
                &b.running_var,
                &b.l1.w,
                &b.l1.b,
                &b.l2.w,
                &b.l2.b,
            ]);
        }
        v.extend([&self.output.w, &self.output.b]);
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(path, &self.all_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(read_tensors(path)?)
    }

    pub fn from_tensors(mut t: Vec<Array2<f64>>) -> Result<Self> {
        let bad = |m: &str| Error::CountMismatch(format!("distilled checkpoint: {m}"));
        if t.len() < 6 || !(t.len() - 6).is_multiple_of(8) {
            return Err(bad("unexpected tensor count"));
        }
        let output_b = t.pop().expect("count checked");
        let output_w = t.pop().expect("count checked");
        let mut it = t.into_iter();
        let mut take = || it.next().expect("count checked");
        let offset = take();
        let scale = take();
        let input = Linear { w: take(), b: take() };
        if offset.dim() != (1, CONFIG_DIM) || scale.dim() != (1, CONFIG_DIM) || input.w.nrows() != FEATURES {
            return Err(bad("input shapes"));
        }
        let width = input.w.ncols();
        let row = (1, width);
        if input.b.dim() != row {
            return Err(bad("input shapes"));
        }
        let mut blocks = Vec::new();
        let n_blocks = (it.len()) / 8;
        for _ in 0..n_blocks {
            let mut take = || it.next().expect("count checked");
            let block = Block {
                gamma: take(),
                beta: take(),
                running_mean: take(),
                running_var: take(),
                l1: Linear { w: take(), b: take() },
                l2: Linear { w: take(), b: take() },
            };
            let rows_ok = [&block.gamma, &block.beta, &block.running_mean, &block.running_var, &block.l1.b, &block.l2.b]
                .iter()
                .all(|a| a.dim() == row);
            if !rows_ok || block.l1.w.dim() != (width, width) || block.l2.w.dim() != (width, width) {
                return Err(bad("block shapes"));
            }
            blocks.push(block);
        }
        let output = Linear { w: output_w, b: output_b };
        if output.w.nrows() != width || output.b.dim() != (1, output.w.ncols()) {
            return Err(bad("output shapes"));
        }
        Ok(Self {
            offset,
            scale,
            input,
            blocks,
            output,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::project;

    fn random_configs(n: usize, seed: u64) -> Vec<Configuration> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..CONFIG_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
                project(&v).unwrap()
            })
            .collect()
    }

    /// A model with non-trivial read-out and normalization statistics.
    fn perturbed(width: usize, blocks: usize, seed: u64) -> DistilledModel {
        let mut m = DistilledModel::new(width, blocks, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        m.output = Linear::new(width, 6, 1.0, &mut rng);
        for b in &mut m.blocks {
            b.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            b.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
            b.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
            b.beta.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        }
        m
    }

    #[test]
    fn fresh_model_outputs_zero() {
        let m = DistilledModel::new(16, 2, 8, 0);
        for q in random_configs(5, 1) {
            assert!(m.forward(&q).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn infer_is_deterministic_and_batch_matches_rows() {
        let m = perturbed(32, 3, 2);
        let qs = random_configs(37, 3);
        let batch = m.predict_with(&qs, Exec::Sequential).unwrap();
        for (i, q) in qs.iter().enumerate() {
            let one = m.forward(q).unwrap();
            assert_eq!(one, m.forward(q).unwrap());
            for (a, b) in one.values().iter().zip(batch.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(batch, m.predict_with(&qs, Exec::default()).unwrap());
    }

    #[test]
    fn rejects_non_finite_input() {
        let m = DistilledModel::new(8, 1, 4, 0);
        let mut x = config_matrix(&random_configs(1, 0));
        x[[0, 2]] = f64::NAN;
        assert!(matches!(m.forward_batch(&x, Mode::Infer), Err(Error::NonFiniteInput)));
        let q = random_configs(1, 0)[0];
        assert!(matches!(m.grad(&q, &[f64::NAN; 4]), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = perturbed(16, 2, 4);
        let q = random_configs(1, 5)[0];
        let (g, dx) = m.grad(&q, &[0.0; 6]).unwrap();
        assert!(g.iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert_eq!(dx, [0.0; CONFIG_DIM]);
    }

    #[test]
    fn linear_model_input_gradient_is_analytic() {
        let m = perturbed(8, 0, 6);
        let q = random_configs(1, 7)[0];
        let up = [0.3, -0.1, 0.7, 0.2, -0.4, 0.05];
        let (_, dx) = m.grad(&q, &up).unwrap();
        // Zero blocks: output = featurize(x) W_in W_out + const, so the input
        // gradient is J^T (W_in W_out up) with J the featurization Jacobian,
        // taken here by central differences.
        let w = m.input.w.dot(&m.output.w);
        let g: Vec<f64> = (0..FEATURES).map(|f| (0..6).map(|k| w[[f, k]] * up[k]).sum()).collect();
        let x = config_matrix(&[q]);
        let h = 1e-6;
        for j in 0..CONFIG_DIM {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[[0, j]] += h;
            xm[[0, j]] -= h;
            let (fp, fm) = (featurize(&xp, &m.offset, &m.scale), featurize(&xm, &m.offset, &m.scale));
            let expect: f64 = (0..FEATURES).map(|f| (fp[[0, f]] - fm[[0, f]]) / (2.0 * h) * g[f]).sum();
            assert!((dx[j] - expect).abs() < 1e-8, "{j}: {} vs {expect}", dx[j]);
        }
    }

    #[test]
    fn train_mode_gradients_match_finite_differences() {
        let mut m = perturbed(12, 2, 8);
        let x = config_matrix(&random_configs(6, 9));
        let up = Array2::from_shape_fn((6, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4);
        let mode = Mode::Train {
            dropout: 0.2,
            dropout_seed: 3,
        };
        let f = |m: &DistilledModel, x: &Array2<f64>| (m.forward_batch(x, mode).unwrap() * &up).sum();
        let (_, cache) = m.forward_cached(&x, mode);
        let (grads, dx) = m.backward(&cache, &up, true);
        let h = 1e-5;
        for (i, j) in [(0, 0), (3, 4), (5, 6)] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[[i, j]] += h;
            xm[[i, j]] -= h;
            let fd = (f(&m, &xp) - f(&m, &xm)) / (2.0 * h);
            assert!((fd - dx[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()), "dx {fd} vs {}", dx[[i, j]]);
        }
        for (p, g) in grads.iter().enumerate() {
            let idx = (0, g.ncols() / 2);
            let orig = m.params()[p][idx];
            m.params_mut()[p][idx] = orig + h;
            let fp = f(&m, &x);
            m.params_mut()[p][idx] = orig - h;
            let fm = f(&m, &x);
            m.params_mut()[p][idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {p}");
        }
    }

    #[test]
    fn checkpoint_round_trip_at_single_precision() {
        let m = perturbed(16, 3, 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gpol");
        m.save(&path).unwrap();
        let back = DistilledModel::load(&path).unwrap();
        assert_eq!(back.blocks.len(), 3);
        let round = |a: &Array2<f64>| a.mapv(|v| v as f32 as f64);
        assert_eq!(back.input.w, round(&m.input.w));
        assert_eq!(back.blocks[2].running_var, round(&m.blocks[2].running_var));
        assert!(matches!(
            DistilledModel::load(&dir.path().join("missing.gpol")),
            Err(Error::MissingArtifact(_))
        ));
        assert!(DistilledModel::from_tensors(vec![Array2::zeros((1, 7)); 7]).is_err());
    }
}
