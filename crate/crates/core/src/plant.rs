//! Longitudinal point-mass vehicle, piecewise-constant environment and noisy
//! reward measurement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DceeError, Result};
use crate::reward::{QuadraticRewardSpec, RewardParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// s
    pub dt: f64,
    /// Constant road load, N.
    pub c0: f64,
    /// Linear drag, N·s/m.
    pub c1: f64,
    /// Quadratic drag, N·s²/m².
    pub c2: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams { mass: 1500.0, dt: 0.1, c0: 100.0, c1: 5.0, c2: 0.4, u_min: -5000.0, u_max: 5000.0 }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mass, self.dt, self.c0, self.c1, self.c2, self.u_min, self.u_max];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(DceeError::Config("vehicle parameters must be finite".into()));
        }
        if self.mass <= 0.0 || self.dt <= 0.0 {
            return Err(DceeError::Config("vehicle mass and dt must be > 0".into()));
        }
        if self.u_min >= self.u_max {
            return Err(DceeError::Config("vehicle u_min must be < u_max".into()));
        }
        if self.c0 < 0.0 || self.c1 < 0.0 || self.c2 < 0.0 {
            return Err(DceeError::Config("drag coefficients must be >= 0".into()));
        }
        Ok(())
    }

    /// Road load at speed `v` excluding the environment disturbance.
    #[inline]
    pub fn drag(&self, v: f64) -> f64 {
        self.c0 + self.c1 * v + self.c2 * v * v
    }

    /// `∂v⁺/∂u` of the unclamped Euler step.
    #[inline]
    pub fn input_gain(&self) -> f64 {
        self.dt / self.mass
    }

    #[inline]
    pub fn clamp_input(&self, u: f64) -> f64 {
        u.clamp(self.u_min, self.u_max)
    }

    /// Half-width of the input box; used to normalize the input for damping
    /// and gradient gains.
    #[inline]
    pub fn input_scale(&self) -> f64 {
        0.5 * (self.u_max - self.u_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// m/s
    pub v: f64,
}

impl PlantState {
    pub fn new(v: f64) -> Self {
        PlantState { v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSegment {
    pub t_start: f64,
    pub theta_true: RewardParams,
    /// Lumped road-load disturbance, N (positive opposes motion).
    pub disturbance_force: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_reward: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { sigma_reward: 0.01, seed: 42 }
    }
}

/// Euler step with affine-plus-quadratic drag. The input is clamped to the
/// actuator box and the speed to `v >= 0`.
pub fn plant_step(params: &VehicleParams, state: PlantState, u: f64, segment: &EnvSegment) -> Result<PlantState> {
    if !state.v.is_finite() || !u.is_finite() {
        return Err(DceeError::InvalidInput(format!("non-finite plant step (v = {}, u = {u})", state.v)));
    }
    Ok(PlantState { v: euler_speed(params, state.v, params.clamp_input(u), segment.disturbance_force).max(0.0) })
}

/// Unclamped Euler update `v + (dt/m)(u − drag(v) − d)`.
#[inline]
pub fn euler_speed(params: &VehicleParams, v: f64, u: f64, disturbance: f64) -> f64 {
    v + params.input_gain() * (u - params.drag(v) - disturbance)
}

/// Zero-mean Gaussian sample that depends only on `(seed, k)`.
pub fn noise_sample(noise: &NoiseSpec, k: u64) -> f64 {
    if noise.sigma_reward == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(k);
    let n: f64 = StandardNormal.sample(&mut rng);
    noise.sigma_reward * n
}

/// Measured `(y, R_k)` at step `k`.
pub fn measure(
    spec: &QuadraticRewardSpec,
    state: PlantState,
    segment: &EnvSegment,
    noise: &NoiseSpec,
    k: u64,
) -> Result<(f64, f64)> {
    let y = state.v;
    let reward = spec.eval_reward(&segment.theta_true, y)?;
    Ok((y, reward + noise_sample(noise, k)))
}

pub fn validate_schedule(schedule: &[EnvSegment], spec: &QuadraticRewardSpec) -> Result<()> {
    let first = schedule.first().ok_or_else(|| DceeError::Config("environment schedule is empty".into()))?;
    if first.t_start != 0.0 {
        return Err(DceeError::Config(format!("first segment must start at t = 0, got {}", first.t_start)));
    }
    for w in schedule.windows(2) {
        if !(w[1].t_start > w[0].t_start) {
            return Err(DceeError::Config("segment start times must be strictly increasing".into()));
        }
    }
    for seg in schedule {
        if !spec.is_admissible(&seg.theta_true) || !seg.disturbance_force.is_finite() {
            return Err(DceeError::Config(format!("segment at t = {} is not admissible", seg.t_start)));
        }
    }
    Ok(())
}

/// Segment with the largest `t_start <= t` (left-closed intervals).
pub fn active_segment(schedule: &[EnvSegment], t: f64) -> Result<&EnvSegment> {
    if schedule.is_empty() {
        return Err(DceeError::Config("environment schedule is empty".into()));
    }
    let idx = schedule.partition_point(|s| s.t_start <= t);
    Ok(&schedule[idx.saturating_sub(1)])
}
