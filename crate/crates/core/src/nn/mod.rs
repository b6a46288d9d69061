//! Small dense-network toolkit shared by the distilled encoder and the
//! policies: GeLU, dense layers with manual backward passes, AdamW, and the
//! GPOL tensor checkpoint format.

mod checkpoint;
mod optim;

pub use checkpoint::{read_tensors, read_tensors_from, write_tensors, write_tensors_to, CHECKPOINT_MAGIC};
pub use optim::{clip_grad_norm, AdamHyper, AdamState};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GeLU, tanh approximation, written as `x · σ(2u)` since
/// `(1 + tanh u) / 2 = σ(2u)` and `exp` is much cheaper than `tanh`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

/// Fully connected layer `y = x·W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    /// Normal init with std `gain / sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            w,
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Returns `(dW, db, dx)` for upstream gradient `dy`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = dy.dot(&self.w.t());
        (dw, db, dx)
    }

    /// Like [`Linear::backward`] but skips the input gradient.
    pub fn backward_params(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        (dw, db)
    }
}

/// Plain MLP with GeLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations cached by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`. The last layer is scaled by `out_gain`.
    pub fn new<R: Rng>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 2f64.sqrt() };
                Linear::new(sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < n {
                h.mapv_inplace(gelu);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            if i + 1 < n {
                h = z.mapv(gelu);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, MlpCache { inputs, pre })
    }

    /// Backpropagates `dy`. Gradients come back as `[dW0, db0, dW1, ...]`.
    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, need_input: bool) -> (Vec<Array2<f64>>, Option<Array2<f64>>) {
        let n = self.layers.len();
        let mut grads = vec![Array2::zeros((0, 0)); 2 * n];
        let mut d = dy.clone();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if i == 0 && !need_input {
                let (dw, db) = layer.backward_params(&cache.inputs[0], &d);
                grads[0] = dw;
                grads[1] = db;
                return (grads, None);
            }
            let (dw, db, dx) = layer.backward(&cache.inputs[i], &d);
            grads[2 * i] = dw;
            grads[2 * i + 1] = db;
            d = dx;
            if i > 0 {
                d.zip_mut_with(&cache.pre[i - 1], |g, &z| *g *= gelu_grad(z));
            }
        }
        (grads, Some(d))
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    /// Rebuilds from `[W0, b0, W1, b1, ...]`.
    pub fn from_tensors(tensors: Vec<Array2<f64>>) -> Option<Self> {
        if tensors.is_empty() || !tensors.len().is_multiple_of(2) {
            return None;
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            if b.nrows() != 1 || b.ncols() != w.ncols() {
                return None;
            }
            if let Some(prev) = layers.last().map(Linear::fan_out) {
                if prev != w.nrows() {
                    return None;
                }
            }
            layers.push(Linear { w, b });
        }
        Some(Self { layers })
    }
}
