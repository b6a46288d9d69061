//! Planar four-link arm with a square cube.
//!
//! The arm is anchored at the origin of a vertical plane (x horizontal, y up).
//! Joint 0 is the base angle measured from the +x axis; joints 1..3 are
//! relative angles. The cube is a square of half-width [`CUBE_HALF_WIDTH`]
//! that rests on nothing: it keeps whatever height it is left at, subject to
//! the floor-support and base-clearance constraints enforced by [`project`].

mod render;

pub use render::{keypoints, Encoder, ViewEncoder, ViewSpec, FEATURE_BANDWIDTH, KEYPOINTS};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_DIM: usize = 7;
pub const NUM_JOINTS: usize = 4;
pub const ACTION_DIM: usize = 5;

pub const LINK_LENGTHS: [f64; NUM_JOINTS] = [0.5, 0.4, 0.35, 0.3];
pub const JOINT_LIMITS: [(f64, f64); NUM_JOINTS] = [(-PI, PI), (-2.4, 2.4), (-2.4, 2.4), (-2.4, 2.4)];
pub const CUBE_X_LIMITS: (f64, f64) = (-2.0, 2.0);
pub const CUBE_HALF_WIDTH: f64 = 0.1;
pub const BASE_CLEARANCE: f64 = 0.15;

pub const TORQUE_GAIN: f64 = 8.0;
pub const JOINT_DAMPING: f64 = 2.0;
pub const GRIP_RADIUS: f64 = 0.15;
pub const CUBE_FRICTION: f64 = 0.9;
pub const RESET_NOISE: f64 = 0.01;

pub const DEFAULT_CUBE: (f64, f64, f64) = (0.8, 0.2, 0.0);

/// Slack allowed by [`Configuration::check_admissible`] for round-off in the
/// clearance push.
const ADMISSIBLE_TOL: f64 = 1e-9;

/// A point in the 7-dimensional pose space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; CONFIG_DIM]", into = "[f64; CONFIG_DIM]")]
pub struct Configuration {
    pub joints: [f64; NUM_JOINTS],
    pub cube_x: f64,
    pub cube_y: f64,
    pub cube_theta: f64,
}

impl From<[f64; CONFIG_DIM]> for Configuration {
    fn from(a: [f64; CONFIG_DIM]) -> Self {
        Self {
            joints: [a[0], a[1], a[2], a[3]],
            cube_x: a[4],
            cube_y: a[5],
            cube_theta: a[6],
        }
    }
}

impl From<Configuration> for [f64; CONFIG_DIM] {
    fn from(q: Configuration) -> Self {
        q.to_array()
    }
}

impl Configuration {
    pub fn default_pose() -> Self {
        Self {
            joints: [0.0; NUM_JOINTS],
            cube_x: DEFAULT_CUBE.0,
            cube_y: DEFAULT_CUBE.1,
            cube_theta: DEFAULT_CUBE.2,
        }
    }

    pub fn to_array(&self) -> [f64; CONFIG_DIM] {
        let j = self.joints;
        [j[0], j[1], j[2], j[3], self.cube_x, self.cube_y, self.cube_theta]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let a: [f64; CONFIG_DIM] = v.try_into().map_err(|_| Error::DimensionMismatch {
            expected: CONFIG_DIM,
            got: v.len(),
        })?;
        Ok(a.into())
    }

    /// Euclidean distance with configurations seen as plain 7-vectors.
    pub fn distance(&self, other: &Configuration) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_admissible(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let bad = |what: String| Err(Error::InadmissibleConfiguration(what));
        for (i, (&angle, &(lo, hi))) in self.joints.iter().zip(&JOINT_LIMITS).enumerate() {
            if angle < lo || angle > hi {
                return bad(format!("joint {i} angle {angle} outside [{lo}, {hi}]"));
            }
        }
        if self.cube_x < CUBE_X_LIMITS.0 || self.cube_x > CUBE_X_LIMITS.1 {
            return bad(format!("cube_x {} outside [-2, 2]", self.cube_x));
        }
        if self.cube_theta < -PI || self.cube_theta > PI {
            return bad(format!("cube_theta {} outside [-pi, pi]", self.cube_theta));
        }
        if self.cube_y < floor_height(self.cube_theta) - ADMISSIBLE_TOL {
            return bad(format!("cube below floor (y = {})", self.cube_y));
        }
        if self.cube_x.hypot(self.cube_y) < BASE_CLEARANCE - ADMISSIBLE_TOL {
            return bad("cube intersects the arm base".to_string());
        }
        Ok(())
    }

    pub fn is_admissible(&self) -> bool {
        self.check_admissible().is_ok()
    }
}

/// Lowest admissible cube-centre height for a given orientation.
pub fn floor_height(theta: f64) -> f64 {
    CUBE_HALF_WIDTH * (theta.cos().abs() + theta.sin().abs())
}

fn wrap_angle(theta: f64) -> f64 {
    if (-PI..=PI).contains(&theta) {
        theta
    } else {
        (theta + PI).rem_euclid(2.0 * PI) - PI
    }
}

/// Maps any finite 7-vector to a nearby admissible configuration.
///
/// Steps, in order: clamp joints; clamp `cube_x` and wrap `cube_theta`;
/// lift the cube onto the floor; push the cube radially out of the base.
/// The result is admissible and `project(project(q)) == project(q)`.
pub fn project(q: &[f64]) -> Result<Configuration> {
    if q.len() != CONFIG_DIM {
        return Err(Error::DimensionMismatch {
            expected: CONFIG_DIM,
            got: q.len(),
        });
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let mut c = Configuration::from_slice(q)?;
    for (angle, &(lo, hi)) in c.joints.iter_mut().zip(&JOINT_LIMITS) {
        *angle = angle.clamp(lo, hi);
    }
    c.cube_x = c.cube_x.clamp(CUBE_X_LIMITS.0, CUBE_X_LIMITS.1);
    c.cube_theta = wrap_angle(c.cube_theta);
    c.cube_y = c.cube_y.max(floor_height(c.cube_theta));
    // The floor step leaves cube_y > 0, so the radius below is never zero.
    let r = c.cube_x.hypot(c.cube_y);
    if r < BASE_CLEARANCE {
        let (x0, y0) = (c.cube_x, c.cube_y);
        let mut s = BASE_CLEARANCE / r;
        // Rounding can leave the pushed radius an ulp short, which would make
        // a second projection move the cube again.
        loop {
            c.cube_x = x0 * s;
            c.cube_y = y0 * s;
            if c.cube_x.hypot(c.cube_y) >= BASE_CLEARANCE {
                break;
            }
            s *= 1.0 + f64::EPSILON;
        }
    }
    Ok(c)
}

/// Physics and episode constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    pub dt: f64,
    pub horizon: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self { dt: 0.05, horizon: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub config: Configuration,
    /// Joint angular velocities, then cube (vx, vy, angular).
    pub velocities: [f64; CONFIG_DIM],
    pub timestep: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub torques: [f64; NUM_JOINTS],
    pub grip: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        torques: [0.0; NUM_JOINTS],
        grip: 0.0,
    };

    /// Builds an action from a raw 5-vector, clamping every entry to [-1, 1].
    pub fn from_slice(a: &[f64]) -> Self {
        let c = |i: usize| {
            let v = a.get(i).copied().unwrap_or(0.0);
            if v.is_nan() {
                0.0
            } else {
                v.clamp(-1.0, 1.0)
            }
        };
        Self {
            torques: [c(0), c(1), c(2), c(3)],
            grip: c(4),
        }
    }

    pub fn clamped(&self) -> Self {
        let t = self.torques;
        Self::from_slice(&[t[0], t[1], t[2], t[3], self.grip])
    }
}

/// Initial-state distribution overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ResetOptions {
    /// Replaces the noisy default cube height with a uniform draw.
    pub cube_y_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Env {
    pub params: EnvParams,
}

impl Env {
    pub fn new(params: EnvParams) -> Self {
        Self { params }
    }

    pub fn horizon(&self) -> usize {
        self.params.horizon
    }

    pub fn reset(&self, seed: u64) -> State {
        self.reset_with(seed, ResetOptions::default())
    }

    pub fn reset_with(&self, seed: u64, opts: ResetOptions) -> State {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pose = Configuration::default_pose().to_array();
        for p in pose.iter_mut() {
            *p += rng.random_range(-RESET_NOISE..=RESET_NOISE);
        }
        let mut velocities = [0.0; CONFIG_DIM];
        for v in velocities.iter_mut() {
            *v = rng.random_range(-RESET_NOISE..=RESET_NOISE);
        }
        if let Some((lo, hi)) = opts.cube_y_range {
            pose[5] = rng.random_range(lo..=hi);
        }
        let config = project(&pose).expect("default pose is finite");
        State {
            config,
            velocities,
            timestep: 0,
        }
    }

    /// Advances one semi-implicit Euler step.
    pub fn step(&self, s: &State, a: &Action) -> Result<State> {
        let horizon = self.params.horizon;
        if s.timestep >= horizon {
            return Err(Error::EpisodeOver {
                timestep: s.timestep,
                horizon,
            });
        }
        let dt = self.params.dt;
        let a = a.clamped();
        let mut q = s.config;
        let mut vel = s.velocities;

        let (tip_before, heading_before) = tip_pose(&q.joints);
        for i in 0..NUM_JOINTS {
            let accel = TORQUE_GAIN * a.torques[i] - JOINT_DAMPING * vel[i];
            vel[i] += dt * accel;
            q.joints[i] += dt * vel[i];
            let (lo, hi) = JOINT_LIMITS[i];
            if q.joints[i] <= lo || q.joints[i] >= hi {
                q.joints[i] = q.joints[i].clamp(lo, hi);
                vel[i] = 0.0;
            }
        }
        let (tip_after, heading_after) = tip_pose(&q.joints);

        let gap = (tip_before[0] - q.cube_x).hypot(tip_before[1] - q.cube_y);
        if a.grip > 0.0 && gap <= GRIP_RADIUS {
            vel[4] = (tip_after[0] - tip_before[0]) / dt;
            vel[5] = (tip_after[1] - tip_before[1]) / dt;
            vel[6] = (heading_after - heading_before) / dt;
        } else {
            for v in &mut vel[4..] {
                *v *= CUBE_FRICTION;
            }
        }
        q.cube_x += dt * vel[4];
        q.cube_y += dt * vel[5];
        q.cube_theta += dt * vel[6];

        Ok(State {
            config: project(&q.to_array())?,
            velocities: vel,
            timestep: s.timestep + 1,
        })
    }
}

/// Configuration part of a state.
pub fn config_of(s: &State) -> Configuration {
    s.config
}

/// End-effector position and absolute heading.
pub fn tip_pose(joints: &[f64; NUM_JOINTS]) -> ([f64; 2], f64) {
    let mut p = [0.0, 0.0];
    let mut heading = 0.0;
    for (angle, len) in joints.iter().zip(LINK_LENGTHS) {
        heading += angle;
        p[0] += len * heading.cos();
        p[1] += len * heading.sin();
    }
    (p, heading)
}
