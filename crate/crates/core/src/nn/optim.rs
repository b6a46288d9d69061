use ndarray::Array2;

/// Adam moment decays and the decoupled weight-decay coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) decay. Zero gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }
}

/// First and second moment estimates over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descent step on a flat slice: `params -= lr · m̂ / (√v̂ + ε)`.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let (c1, c2) = self.corrections();
        self.update(0, params, grads, lr, c1, c2);
    }

    /// Descent step over a list of tensors laid out back to back.
    pub fn step_tensors(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let (c1, c2) = self.corrections();
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            assert_eq!(p.dim(), g.dim());
            let n = p.len();
            let ps = p.as_slice_mut().expect("standard layout parameter");
            let g = g.as_standard_layout();
            self.update(offset, ps, g.as_slice().expect("standard layout"), lr, c1, c2);
            offset += n;
        }
        assert_eq!(offset, self.m.len(), "parameter count changed");
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t as i32;
        (
            1.0 - self.hyper.beta1.powi(t),
            1.0 - self.hyper.beta2.powi(t),
        )
    }

    fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64], lr: f64, c1: f64, c2: f64) {
        let AdamHyper {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            params[i] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * params[i]);
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
    }
    norm
}
