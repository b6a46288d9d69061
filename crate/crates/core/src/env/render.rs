//! Analytic stand-in for "render a view, then encode the image".
//!
//! A view looks at the plane along direction `u = (cos angle, sin angle)`.
//! Each of the nine keypoints is reduced to a lateral coordinate (`p · u⊥`)
//! and a depth (`p · u`). Keypoints hidden behind a nearer keypoint take on
//! the occluder's coordinates, so a single view cannot see along its depth
//! axis. The 18 coordinates are pushed through a fixed random Fourier
//! feature map plus a small high-frequency ripple and normalized.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Configuration, CUBE_HALF_WIDTH, LINK_LENGTHS};
use crate::embedding::{multiview_embed, normalize, Embedding};
use crate::error::{Error, Result};

pub const KEYPOINTS: usize = 9;
const FEATURE_INPUTS: usize = 2 * KEYPOINTS;

/// Standard deviation of the smooth feature frequencies.
pub const FEATURE_BANDWIDTH: f64 = 0.3;
/// Frequency multiplier of the ripple term.
const RIPPLE_FREQUENCY: f64 = 40.0;

/// One camera. Serialized with the angle in degrees under `angle_deg`
/// and the feature seed under `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "ViewSpecRepr", from = "ViewSpecRepr")]
pub struct ViewSpec {
    /// Camera direction in radians.
    pub angle: f64,
    pub feature_seed: u64,
    pub occlusion_threshold: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewSpecRepr {
    angle_deg: f64,
    seed: u64,
    #[serde(default = "default_occlusion_threshold")]
    occlusion_threshold: f64,
}

fn default_occlusion_threshold() -> f64 {
    0.05
}

impl From<ViewSpec> for ViewSpecRepr {
    fn from(v: ViewSpec) -> Self {
        Self {
            angle_deg: v.angle.to_degrees(),
            seed: v.feature_seed,
            occlusion_threshold: v.occlusion_threshold,
        }
    }
}

impl From<ViewSpecRepr> for ViewSpec {
    fn from(r: ViewSpecRepr) -> Self {
        Self {
            angle: r.angle_deg.to_radians(),
            feature_seed: r.seed,
            occlusion_threshold: r.occlusion_threshold,
        }
    }
}

impl ViewSpec {
    pub fn new(angle: f64, feature_seed: u64) -> Self {
        Self {
            angle,
            feature_seed,
            occlusion_threshold: default_occlusion_threshold(),
        }
    }

    pub fn from_degrees(deg: f64, feature_seed: u64) -> Self {
        Self::new(deg.to_radians(), feature_seed)
    }

    /// The three retrieval views at -45°, 0° and +45°.
    pub fn default_set(feature_seed: u64) -> Vec<ViewSpec> {
        [-45.0, 0.0, 45.0]
            .into_iter()
            .map(|d| Self::from_degrees(d, feature_seed))
            .collect()
    }
}

/// Arm joints and tip, then the four cube corners.
pub fn keypoints(q: &Configuration) -> [[f64; 2]; KEYPOINTS] {
    let mut pts = [[0.0; 2]; KEYPOINTS];
    let mut heading = 0.0;
    for (i, (angle, len)) in q.joints.iter().zip(LINK_LENGTHS).enumerate() {
        heading += angle;
        pts[i + 1] = [
            pts[i][0] + len * heading.cos(),
            pts[i][1] + len * heading.sin(),
        ];
    }
    let (s, c) = q.cube_theta.sin_cos();
    let h = CUBE_HALF_WIDTH;
    for (k, (dx, dy)) in [(h, h), (-h, h), (-h, -h), (h, -h)].into_iter().enumerate() {
        pts[5 + k] = [q.cube_x + c * dx - s * dy, q.cube_y + s * dx + c * dy];
    }
    pts
}

/// Feature map for one camera.
#[derive(Debug, Clone)]
pub struct ViewEncoder {
    spec: ViewSpec,
    dim: usize,
    amplitude: f64,
    /// Row-major `dim × 18`.
    smooth: Vec<f64>,
    ripple: Vec<f64>,
    phase: Vec<f64>,
}

impl ViewEncoder {
    pub fn new(spec: ViewSpec, dim: usize, osc_amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.feature_seed);
        let n = dim * FEATURE_INPUTS;
        let smooth: Vec<f64> = (0..n)
            .map(|_| FEATURE_BANDWIDTH * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let ripple: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let phase: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self {
            spec,
            dim,
            amplitude: osc_amplitude,
            smooth,
            ripple,
            phase,
        }
    }

    pub fn spec(&self) -> &ViewSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lateral/depth pairs after occlusion, flattened to 18 values.
    pub fn view_coordinates(&self, q: &Configuration) -> [f64; FEATURE_INPUTS] {
        let (s, c) = self.spec.angle.sin_cos();
        let pts = keypoints(q);
        let raw: Vec<(f64, f64)> = pts
            .iter()
            .map(|p| (-s * p[0] + c * p[1], c * p[0] + s * p[1]))
            .collect();
        let thr = self.spec.occlusion_threshold;
        let mut out = [0.0; FEATURE_INPUTS];
        for (i, &(lat, depth)) in raw.iter().enumerate() {
            let mut seen = (lat, depth);
            for (j, &(l2, d2)) in raw.iter().enumerate() {
                if j != i && (l2 - lat).abs() < thr && d2 < depth && d2 < seen.1 {
                    seen = (l2, d2);
                }
            }
            out[2 * i] = seen.0;
            out[2 * i + 1] = seen.1;
        }
        out
    }

    /// Unit embedding of one view of `q`.
    pub fn render_features(&self, q: &Configuration) -> Result<Embedding> {
        q.check_admissible()?;
        let v = self.view_coordinates(q);
        let feats: Vec<f64> = (0..self.dim)
            .map(|k| {
                let row = k * FEATURE_INPUTS..(k + 1) * FEATURE_INPUTS;
                let z: f64 = self.smooth[row.clone()].iter().zip(&v).map(|(w, x)| w * x).sum();
                let r: f64 = self.ripple[row].iter().zip(&v).map(|(w, x)| w * x).sum();
                (z + self.phase[k]).cos() + self.amplitude * (RIPPLE_FREQUENCY * r).cos()
            })
            .collect();
        normalize(&feats)
    }
}

/// The exact multiview configuration encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    views: Vec<ViewEncoder>,
    dim: usize,
}

impl Encoder {
    pub fn new(specs: &[ViewSpec], dim: usize, osc_amplitude: f64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::EmptyViewList);
        }
        Ok(Self {
            views: specs
                .iter()
                .map(|s| ViewEncoder::new(*s, dim, osc_amplitude))
                .collect(),
            dim,
        })
    }

    /// Default three views, d = 64, ripple amplitude 0.05.
    pub fn default_views(feature_seed: u64) -> Self {
        Self::new(&ViewSpec::default_set(feature_seed), crate::embedding::DEFAULT_DIM, 0.05)
            .expect("non-empty view set")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn views(&self) -> &[ViewEncoder] {
        &self.views
    }

    pub fn specs(&self) -> Vec<ViewSpec> {
        self.views.iter().map(|v| *v.spec()).collect()
    }

    /// Encoder restricted to a subset of its views.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let views: Vec<ViewEncoder> = indices
            .iter()
            .filter_map(|&i| self.views.get(i).cloned())
            .collect();
        if views.is_empty() {
            return Err(Error::EmptyViewList);
        }
        Ok(Self { views, dim: self.dim })
    }

    /// Mean over views of the per-view unit embeddings.
    pub fn true_config_embedding(&self, q: &Configuration) -> Result<Embedding> {
        let per_view = self
            .views
            .iter()
            .map(|v| v.render_features(q))
            .collect::<Result<Vec<_>>>()?;
        multiview_embed(&per_view)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{score, Query};
    use crate::env::project;

    fn random_admissible(rng: &mut ChaCha8Rng) -> Configuration {
        let v: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        project(&v).unwrap()
    }

    #[test]
    fn keypoints_of_default_pose() {
        let pts = keypoints(&Configuration::default_pose());
        assert_eq!(pts[0], [0.0, 0.0]);
        assert!((pts[4][0] - LINK_LENGTHS.iter().sum::<f64>()).abs() < 1e-12);
        assert!((pts[5][0] - 0.9).abs() < 1e-12 && (pts[5][1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn render_is_deterministic_unit() {
        let enc = Encoder::default_views(11);
        let q = Configuration::from([0.5, 0.2, -0.7, 1.1, -0.6, 0.8, 0.3]);
        for v in enc.views() {
            let a = v.render_features(&q).unwrap();
            let b = v.render_features(&q).unwrap();
            assert_eq!(a, b);
            assert!((a.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn render_rejects_inadmissible() {
        let enc = Encoder::default_views(0);
        let mut q = Configuration::default_pose();
        q.joints[2] = 3.0;
        assert!(matches!(
            enc.views()[0].render_features(&q),
            Err(Error::InadmissibleConfiguration(_))
        ));
    }

    #[test]
    fn occluded_keypoint_depth_perturbation_is_invisible_to_front_view() {
        // With the arm nearly horizontal every arm keypoint sits behind the
        // base in the 0° view; tilting the base a little keeps them hidden.
        let enc = Encoder::default_views(5);
        let front = &enc.views()[1];
        assert_eq!(front.spec().angle, 0.0);
        let a = Configuration::default_pose();
        let mut b = a;
        b.joints[0] = 0.02;
        assert_eq!(front.render_features(&a).unwrap(), front.render_features(&b).unwrap());
        assert_ne!(
            enc.views()[0].render_features(&a).unwrap(),
            enc.views()[0].render_features(&b).unwrap()
        );
    }

    #[test]
    fn single_view_encoder_matches_render() {
        let enc = Encoder::default_views(2).select(&[1]).unwrap();
        let q = Configuration::from([1.0, -0.5, 0.5, 0.2, 1.5, 0.4, -1.0]);
        assert_eq!(
            enc.true_config_embedding(&q).unwrap(),
            enc.views()[0].render_features(&q).unwrap()
        );
    }

    #[test]
    fn multiview_matches_independent_loop() {
        let enc = Encoder::default_views(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q = random_admissible(&mut rng);
            let e = enc.true_config_embedding(&q).unwrap();
            assert!(e.norm() <= 1.0 + 1e-12);
            let mut acc = vec![0.0; enc.dim()];
            for v in enc.views() {
                let r = v.render_features(&q).unwrap();
                for (a, x) in acc.iter_mut().zip(r.values()) {
                    *a += x / 3.0;
                }
            }
            for (x, y) in e.values().iter().zip(&acc) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn strict_local_maxima(xs: &[f64]) -> usize {
        xs.windows(3).filter(|w| w[1] > w[0] && w[1] > w[2]).count()
    }

    #[test]
    fn score_oscillates_along_a_line() {
        let enc = Encoder::default_views(4);
        let front = enc.select(&[1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let a = random_admissible(&mut rng);
            let b = random_admissible(&mut rng);
            let target = random_admissible(&mut rng);
            let query = Query {
                name: "t".into(),
                embedding: normalize(enc.true_config_embedding(&target).unwrap().values()).unwrap(),
            };
            let (aa, bb) = (a.to_array(), b.to_array());
            let scores: Vec<f64> = (0..1000)
                .map(|i| {
                    let t = i as f64 / 999.0;
                    let v: Vec<f64> = (0..7).map(|k| aa[k] + t * (bb[k] - aa[k])).collect();
                    let q = project(&v).unwrap();
                    score(&front.true_config_embedding(&q).unwrap(), &query).unwrap()
                })
                .collect();
            assert!(strict_local_maxima(&scores) >= 5);
        }
    }
}
