//! Linear-in-parameters cruising reward.
//!
//! The reward at speed `v` is `R(θ, v) = ψ(v)ᵀθ + ψ₀(v)` with the normalized
//! basis `ψ(v) = [z², z, 1]`, `z = v / v_scale`. For a concave parameter
//! vector the reward peaks at the optimal operating speed
//!
//! ```text
//! Γ(θ) = v_scale · (−θ₁ / (2θ₀))
//! ```
//!
//! A parameter vector is admissible when `θ₀ <= −curvature_floor`, which keeps
//! `Γ` away from its singularity at `θ₀ = 0`.

use nalgebra::{RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{DceeError, Result};

pub const N_THETA: usize = 3;

/// Reward parameter vector `θ` (true environment, ensemble member or mean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams(pub Vector3<f64>);

impl RewardParams {
    pub fn new(theta: [f64; N_THETA]) -> Self {
        RewardParams(Vector3::from(theta))
    }

    pub fn zeros() -> Self {
        RewardParams(Vector3::zeros())
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vector3<f64>> for RewardParams {
    fn from(v: Vector3<f64>) -> Self {
        RewardParams(v)
    }
}

impl std::ops::Index<usize> for RewardParams {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticRewardSpec {
    /// Normalization speed in m/s.
    pub v_scale: f64,
    pub curvature_floor: f64,
}

impl Default for QuadraticRewardSpec {
    fn default() -> Self {
        QuadraticRewardSpec { v_scale: 30.0, curvature_floor: 0.05 }
    }
}

fn check_finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(DceeError::InvalidInput(format!("{name} must be finite, got {x}")))
    }
}

impl QuadraticRewardSpec {
    pub fn new(v_scale: f64, curvature_floor: f64) -> Result<Self> {
        if !(v_scale > 0.0 && v_scale.is_finite()) {
            return Err(DceeError::Config(format!("v_scale must be > 0, got {v_scale}")));
        }
        if !(curvature_floor > 0.0 && curvature_floor.is_finite()) {
            return Err(DceeError::Config(format!(
                "curvature_floor must be > 0, got {curvature_floor}"
            )));
        }
        Ok(QuadraticRewardSpec { v_scale, curvature_floor })
    }

    pub fn basis(&self, v: f64) -> Result<Vector3<f64>> {
        check_finite("speed", v)?;
        let z = v / self.v_scale;
        Ok(Vector3::new(z * z, z, 1.0))
    }

    /// `dψ/dv`.
    pub fn basis_derivative(&self, v: f64) -> Result<Vector3<f64>> {
        check_finite("speed", v)?;
        let z = v / self.v_scale;
        Ok(Vector3::new(2.0 * z / self.v_scale, 1.0 / self.v_scale, 0.0))
    }

    /// Offset term `ψ₀`. The reduced cruising reward has none.
    #[inline]
    pub fn offset(&self, _v: f64) -> f64 {
        0.0
    }

    pub fn eval_reward(&self, theta: &RewardParams, v: f64) -> Result<f64> {
        if !theta.is_finite() {
            return Err(DceeError::InvalidInput("reward parameters must be finite".into()));
        }
        Ok(self.basis(v)?.dot(&theta.0) + self.offset(v))
    }

    pub fn is_admissible(&self, theta: &RewardParams) -> bool {
        theta[0] <= -self.curvature_floor
    }

    /// Clamp the curvature coefficient into the admissible set.
    pub fn project(&self, theta: &RewardParams) -> RewardParams {
        let mut out = *theta;
        out.0[0] = out.0[0].min(-self.curvature_floor);
        out
    }

    fn check_admissible(&self, theta: &RewardParams) -> Result<()> {
        if !theta.is_finite() {
            return Err(DceeError::InvalidInput("reward parameters must be finite".into()));
        }
        if self.is_admissible(theta) {
            Ok(())
        } else {
            Err(DceeError::CurvatureViolation { theta0: theta[0], floor: self.curvature_floor })
        }
    }

    /// Optimal operating speed `Γ(θ)` in m/s.
    pub fn gamma(&self, theta: &RewardParams) -> Result<f64> {
        self.check_admissible(theta)?;
        Ok(self.v_scale * (-theta[1] / (2.0 * theta[0])))
    }

    /// `∂Γ/∂θ` as a 1×3 row.
    pub fn gamma_jacobian(&self, theta: &RewardParams) -> Result<RowVector3<f64>> {
        self.check_admissible(theta)?;
        let (a, b) = (theta[0], theta[1]);
        Ok(RowVector3::new(b / (2.0 * a * a), -1.0 / (2.0 * a), 0.0) * self.v_scale)
    }

    /// Parameters of the peak-form reward `C_R − w_z (z − z*)²`.
    pub fn make_true_params(&self, w_z: f64, v_star: f64, c_r: f64) -> Result<RewardParams> {
        check_finite("w_z", w_z)?;
        check_finite("v_star", v_star)?;
        check_finite("c_r", c_r)?;
        if w_z < self.curvature_floor {
            return Err(DceeError::CurvatureViolation { theta0: -w_z, floor: self.curvature_floor });
        }
        if !(0.0..=2.0 * self.v_scale).contains(&v_star) {
            return Err(DceeError::InvalidInput(format!(
                "optimal speed {v_star} outside [0, {}]",
                2.0 * self.v_scale
            )));
        }
        let z_star = v_star / self.v_scale;
        Ok(RewardParams::new([-w_z, 2.0 * w_z * z_star, c_r - w_z * z_star * z_star]))
    }
}
