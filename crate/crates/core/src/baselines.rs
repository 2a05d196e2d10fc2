//! Comparison controllers: a one-step gradient DCEE law on the same residual
//! as the Gauss-Newton controller, and classical perturbation-based extremum
//! seeking around a speed loop.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DceeError, Result};
use crate::plant::VehicleParams;
use crate::problem::DceeProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradDceeConfig {
    /// Step size `κ` on the objective gradient taken with respect to the
    /// normalized input `u / s`, `s` the half-width of the actuator box.
    pub gain: f64,
}

impl Default for GradDceeConfig {
    fn default() -> Self {
        GradDceeConfig { gain: 0.02 }
    }
}

impl GradDceeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(DceeError::Config(format!("gradient gain must be > 0, got {}", self.gain)));
        }
        Ok(())
    }
}

/// `u = clamp(u_prev − κ s²·2JᵀF)`: one explicit descent step on `D` in the
/// normalized input. Holds `u_prev` when the current point cannot be
/// evaluated.
pub fn grad_dcee_step(p: &DceeProblem<'_>, u_prev: f64, cfg: &GradDceeConfig) -> f64 {
    let Ok(eval) = p.evaluate(u_prev) else {
        return u_prev;
    };
    let s = p.vehicle.input_scale();
    let grad = 2.0 * eval.jacobian.tr_mul(&eval.residual)[0];
    p.vehicle.clamp_input(u_prev - cfg.gain * s * s * grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EscConfig {
    /// Speed dither amplitude, m/s.
    pub dither_amp: f64,
    /// rad/s.
    pub dither_freq: f64,
    pub integrator_gain: f64,
    /// rad/s.
    pub highpass_cutoff: f64,
    /// N per m/s.
    pub speed_loop_gain: f64,
}

impl Default for EscConfig {
    fn default() -> Self {
        EscConfig {
            dither_amp: 0.5,
            dither_freq: 0.8,
            integrator_gain: 60.0,
            highpass_cutoff: 0.1,
            speed_loop_gain: 800.0,
        }
    }
}

impl EscConfig {
    pub fn validate(&self, dt: f64) -> Result<()> {
        let fields = [
            ("dither_amp", self.dither_amp),
            ("dither_freq", self.dither_freq),
            ("integrator_gain", self.integrator_gain),
            ("highpass_cutoff", self.highpass_cutoff),
            ("speed_loop_gain", self.speed_loop_gain),
        ];
        for (name, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(DceeError::Config(format!("esc {name} must be > 0, got {value}")));
            }
        }
        if self.dither_freq * dt >= PI {
            return Err(DceeError::Config("esc dither frequency is above the Nyquist limit".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscState {
    /// Current estimate of the optimal speed, m/s.
    pub setpoint_hat: f64,
    /// Low-pass state of the reward; the high-passed signal is `R − state`.
    pub highpass_state: f64,
    pub k: u64,
}

impl EscState {
    pub fn new(setpoint: f64) -> Self {
        EscState { setpoint_hat: setpoint, highpass_state: f64::NAN, k: 0 }
    }

    /// Speed the inner loop tracks at the current step.
    pub fn commanded_speed(&self, cfg: &EscConfig, dt: f64) -> f64 {
        self.setpoint_hat + cfg.dither_amp * (cfg.dither_freq * self.k as f64 * dt).sin()
    }
}

/// Phase lag of the closed speed loop `v⁺ = v + g(v_cmd − v)`, `g = dt·K/m`,
/// at the dither frequency.
pub fn speed_loop_phase(cfg: &EscConfig, dt: f64, vehicle: &VehicleParams) -> f64 {
    let g = dt * cfg.speed_loop_gain / vehicle.mass;
    let w = cfg.dither_freq * dt;
    w.sin().atan2(w.cos() - (1.0 - g))
}

/// One extremum-seeking step. `reward_meas` is the reward measured at the
/// current speed `v`. The filter and setpoint update first, then the speed
/// loop with drag feedforward produces the force for the next interval.
pub fn esc_step(
    state: EscState,
    cfg: &EscConfig,
    reward_meas: f64,
    dt: f64,
    v: f64,
    vehicle: &VehicleParams,
) -> (f64, EscState) {
    let lowpass = if state.highpass_state.is_finite() { state.highpass_state } else { reward_meas };
    let highpassed = reward_meas - lowpass;
    let lowpass = lowpass + dt * cfg.highpass_cutoff * highpassed;
    // The speed excited by the dither applied over [k−1, k] lags it by the
    // speed-loop phase; demodulate against the lagged reference.
    let phase = cfg.dither_freq * (state.k + 1) as f64 * dt - speed_loop_phase(cfg, dt, vehicle);
    let setpoint_hat = state.setpoint_hat + dt * cfg.integrator_gain * highpassed * phase.sin();

    let next = EscState { setpoint_hat, highpass_state: lowpass, k: state.k + 1 };
    let commanded = next.commanded_speed(cfg, dt);
    let u = vehicle.clamp_input(cfg.speed_loop_gain * (commanded - v) + vehicle.drag(v));
    (u, next)
}
