//! Scenario configuration. Every key is optional; an empty file is the
//! default three-segment scenario.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{EscConfig, GradDceeConfig};
use crate::diagnostics::AuditSetup;
use crate::ensemble::EnsembleInit;
use crate::error::{DceeError, Result};
use crate::plant::{validate_schedule, EnvSegment, NoiseSpec, VehicleParams};
use crate::reward::QuadraticRewardSpec;
use crate::solver::GnConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    NumericalDcee,
    GradDcee,
    Esc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::NumericalDcee, ControllerKind::GradDcee, ControllerKind::Esc];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::NumericalDcee => "numerical_dcee",
            ControllerKind::GradDcee => "grad_dcee",
            ControllerKind::Esc => "esc",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = DceeError;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| DceeError::Config(format!("unknown controller '{s}' (numerical_dcee, grad_dcee, esc)")))
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Reward normalization plus the defaults segments fall back to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub v_scale: f64,
    pub w_z: f64,
    pub c_r: f64,
    pub curvature_floor: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        let spec = QuadraticRewardSpec::default();
        RewardConfig { v_scale: spec.v_scale, w_z: 1.0, c_r: 1.0, curvature_floor: spec.curvature_floor }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub t_start: f64,
    pub v_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_r: Option<f64>,
    #[serde(default)]
    pub disturbance_force: f64,
}

fn default_schedule() -> Vec<SegmentConfig> {
    [(0.0, 25.0, 0.0), (300.0, 20.0, 200.0), (600.0, 30.0, -200.0)]
        .into_iter()
        .map(|(t_start, v_star, disturbance_force)| SegmentConfig {
            t_start,
            v_star,
            w_z: None,
            c_r: None,
            disturbance_force,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = GnConfig::default();
        SolverSettings { max_iters: d.max_iters, tol: d.tol, damping: d.damping }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(rename = "type")]
    pub kind: ControllerKind,
    pub solver: SolverSettings,
    pub grad: GradDceeConfig,
    pub esc: EscConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            kind: ControllerKind::NumericalDcee,
            solver: SolverSettings::default(),
            grad: GradDceeConfig::default(),
            esc: EscConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub w_z: f64,
    pub v_star: f64,
    pub c_r: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { w_z: 0.8, v_star: 15.0, c_r: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n: usize,
    pub eta_lo: f64,
    pub eta_hi: f64,
    pub prior: PriorConfig,
    /// Half-width of the uniform perturbation applied to each prior component.
    pub spread: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { n: 10, eta_lo: 0.05, eta_hi: 0.5, prior: PriorConfig::default(), spread: 0.3, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Write measured solve times into the per-step records. Off by default
    /// so repeated runs produce identical files.
    pub record_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub vehicle: VehicleParams,
    pub reward: RewardConfig,
    pub noise: NoiseSpec,
    pub schedule: Vec<SegmentConfig>,
    pub horizon_s: f64,
    /// Speed at t = 0, m/s.
    pub initial_speed: f64,
    pub controller: ControllerConfig,
    pub ensemble: EnsembleConfig,
    pub harness: HarnessConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            vehicle: VehicleParams::default(),
            reward: RewardConfig::default(),
            noise: NoiseSpec::default(),
            schedule: default_schedule(),
            horizon_s: 900.0,
            initial_speed: 15.0,
            controller: ControllerConfig::default(),
            ensemble: EnsembleConfig::default(),
            harness: HarnessConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DceeError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DceeError::io(path, e))?;
        toml::from_str(&text).map_err(|e| DceeError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DceeError::Config(e.to_string()))
    }

    /// Replace both the noise and the ensemble seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise.seed = seed;
        self.ensemble.seed = seed;
        self
    }

    pub fn with_controller(mut self, kind: ControllerKind) -> Self {
        self.controller.kind = kind;
        self
    }

    pub fn noise_free(mut self) -> Self {
        self.noise.sigma_reward = 0.0;
        self
    }

    pub fn reward_spec(&self) -> Result<QuadraticRewardSpec> {
        QuadraticRewardSpec::new(self.reward.v_scale, self.reward.curvature_floor)
    }

    pub fn segments(&self) -> Result<Vec<EnvSegment>> {
        let spec = self.reward_spec()?;
        self.schedule
            .iter()
            .map(|s| {
                let theta_true = spec.make_true_params(
                    s.w_z.unwrap_or(self.reward.w_z),
                    s.v_star,
                    s.c_r.unwrap_or(self.reward.c_r),
                )?;
                Ok(EnvSegment { t_start: s.t_start, theta_true, disturbance_force: s.disturbance_force })
            })
            .collect()
    }

    pub fn gn_config(&self) -> GnConfig {
        let s = self.controller.solver;
        GnConfig {
            max_iters: s.max_iters,
            tol: s.tol,
            damping: s.damping,
            ..GnConfig::with_bounds(self.vehicle.u_min, self.vehicle.u_max)
        }
    }

    pub fn ensemble_init(&self) -> Result<EnsembleInit> {
        let spec = self.reward_spec()?;
        let e = &self.ensemble;
        if !(e.spread >= 0.0 && e.spread.is_finite()) {
            return Err(DceeError::Config(format!("ensemble spread must be >= 0, got {}", e.spread)));
        }
        Ok(EnsembleInit {
            prior_mean: spec.make_true_params(e.prior.w_z, e.prior.v_star, e.prior.c_r)?,
            spread: [e.spread; 3],
            n: e.n,
            eta_lo: e.eta_lo,
            eta_hi: e.eta_hi,
            seed: e.seed,
        })
    }

    /// Instance distribution of the derivative audit for this scenario.
    pub fn audit_setup(&self) -> Result<AuditSetup> {
        Ok(AuditSetup { vehicle: self.vehicle, spec: self.reward_spec()?, ensemble: self.ensemble_init()? })
    }

    /// Number of control steps, `horizon_s / dt`.
    pub fn steps(&self) -> Result<usize> {
        let dt = self.vehicle.dt;
        let ratio = self.horizon_s / dt;
        let steps = ratio.round();
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            return Err(DceeError::Config(format!("horizon_s must be > 0, got {}", self.horizon_s)));
        }
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 1.0 {
            return Err(DceeError::Config(format!("dt = {dt} does not divide horizon_s = {}", self.horizon_s)));
        }
        Ok(steps as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        let spec = self.reward_spec()?;
        self.steps()?;
        validate_schedule(&self.segments()?, &spec)?;
        if !(self.noise.sigma_reward >= 0.0 && self.noise.sigma_reward.is_finite()) {
            return Err(DceeError::Config(format!("sigma_reward must be >= 0, got {}", self.noise.sigma_reward)));
        }
        if !(self.initial_speed >= 0.0 && self.initial_speed.is_finite()) {
            return Err(DceeError::Config(format!("initial_speed must be >= 0, got {}", self.initial_speed)));
        }
        if self.ensemble.n == 0 {
            return Err(DceeError::Config("ensemble size must be >= 1".into()));
        }
        self.ensemble_init()?;
        self.gn_config().validate()?;
        match self.controller.kind {
            ControllerKind::NumericalDcee => Ok(()),
            ControllerKind::GradDcee => self.controller.grad.validate(),
            ControllerKind::Esc => self.controller.esc.validate(self.vehicle.dt),
        }
    }
}
