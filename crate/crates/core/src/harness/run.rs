//! Closed-loop simulation and the tracking metrics.
//!
//! Each step selects the input from information up to step `k` (warm started
//! at `u_{k−1}`), applies it to the true plant, measures speed and reward at
//! `k + 1`, and then updates the ensemble.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{esc_step, grad_dcee_step, EscState};
use crate::ensemble::{init_ensemble, Ensemble};
use crate::error::{DceeError, Result};
use crate::harness::config::{ControllerKind, ScenarioConfig};
use crate::plant::{active_segment, measure, plant_step, EnvSegment, PlantState};
use crate::problem::DceeProblem;
use crate::reward::QuadraticRewardSpec;
use crate::solver::{controller_step, GnReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub v: f64,
    pub u: f64,
    pub v_star_true: f64,
    pub gamma_mean_est: f64,
    /// `‖y − γ̄‖²` of the candidate-induced prediction at the applied input.
    pub exploit: f64,
    /// `tr Σ_γ` of the candidate-induced prediction at the applied input.
    pub explore: f64,
    pub reward_meas: f64,
    pub solve_time_ns: u64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `|v − v*|` at the final step.
    pub e_v: f64,
    /// `Σ_k |v_k − v*_k|`.
    pub iae_v: f64,
    /// `Σ_k R(θ*_k, v*_k) − R(θ*_k, v_k)`.
    pub regret: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub count: usize,
    pub mean_ns: f64,
    pub max_ns: u64,
    pub p99_ns: u64,
}

impl TimingStats {
    pub fn from_samples(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return TimingStats::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        TimingStats {
            count: sorted.len(),
            mean_ns: sorted.iter().map(|&x| x as f64).sum::<f64>() / sorted.len() as f64,
            max_ns: sorted[sorted.len() - 1],
            p99_ns: sorted[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub controller: ControllerKind,
    pub records: Vec<StepRecord>,
    pub metrics: Metrics,
    /// Measured input-selection times, independent of `record_timing`.
    pub timing: TimingStats,
    /// Solver reports of the numerical controller, one per step.
    #[serde(skip)]
    pub reports: Vec<GnReport>,
    pub fallbacks: usize,
    pub config: ScenarioConfig,
}

/// Metrics from records and the true schedule. The segment active at each
/// record's time supplies `θ*`.
pub fn compute_metrics(records: &[StepRecord], schedule: &[EnvSegment], spec: &QuadraticRewardSpec) -> Result<Metrics> {
    let last = records.last().ok_or_else(|| DceeError::InvalidInput("no records".into()))?;
    let mut iae_v = 0.0;
    let mut regret = 0.0;
    for r in records {
        let seg = active_segment(schedule, r.t)?;
        let v_star = spec.gamma(&seg.theta_true)?;
        iae_v += (r.v - v_star).abs();
        regret += spec.eval_reward(&seg.theta_true, v_star)? - spec.eval_reward(&seg.theta_true, r.v)?;
    }
    let seg = active_segment(schedule, last.t)?;
    let e_v = (last.v - spec.gamma(&seg.theta_true)?).abs();
    Ok(Metrics { e_v, iae_v, regret })
}

/// Per-step hook for callers that want to see each problem the controller
/// solved: `(k, problem, u_prev, u_applied)`.
pub type StepObserver<'o> = dyn FnMut(usize, &DceeProblem<'_>, f64, f64) + 'o;

pub fn run_closed_loop(cfg: &ScenarioConfig) -> Result<RunResult> {
    run_closed_loop_observed(cfg, &mut |_, _, _, _| {})
}

pub fn run_closed_loop_observed(cfg: &ScenarioConfig, observer: &mut StepObserver<'_>) -> Result<RunResult> {
    cfg.validate()?;
    let vehicle = cfg.vehicle;
    let spec = cfg.reward_spec()?;
    let schedule = cfg.segments()?;
    let steps = cfg.steps()?;
    let gn = cfg.gn_config();
    let kind = cfg.controller.kind;
    let dt = vehicle.dt;

    let mut state = PlantState::new(cfg.initial_speed);
    let mut ensemble: Ensemble = init_ensemble(&spec, &cfg.ensemble_init()?)?;
    let (y0, mut reward) = measure(&spec, state, active_segment(&schedule, 0.0)?, &cfg.noise, 0)?;
    ensemble = ensemble.measured_update(&spec, y0, reward)?;

    let mut esc = EscState::new(cfg.initial_speed);
    let mut u_prev = vehicle.clamp_input(vehicle.drag(state.v));
    let mut records = Vec::with_capacity(steps);
    let mut reports = Vec::new();
    let mut times = Vec::with_capacity(steps);
    let mut fallbacks = 0;

    for k in 0..steps {
        let t = k as f64 * dt;
        let t_next = (k + 1) as f64 * dt;
        let problem = DceeProblem::new(vehicle, spec, &ensemble, state);

        let (u, elapsed, iterations) = match kind {
            ControllerKind::NumericalDcee => {
                let (u, report) = controller_step(&problem, u_prev, &gn);
                let out = (u, report.solve_time_ns, report.iterations);
                fallbacks += report.fallback as usize;
                reports.push(report);
                out
            }
            ControllerKind::GradDcee => {
                let start = Instant::now();
                let u = grad_dcee_step(&problem, u_prev, &cfg.controller.grad);
                (u, start.elapsed().as_nanos() as u64, 1)
            }
            ControllerKind::Esc => {
                let start = Instant::now();
                let (u, next) = esc_step(esc, &cfg.controller.esc, reward, dt, state.v, &vehicle);
                esc = next;
                (u, start.elapsed().as_nanos() as u64, 0)
            }
        };
        times.push(elapsed);
        observer(k, &problem, u_prev, u);
        let (exploit, explore) = problem.objective_split(u).unwrap_or((f64::NAN, f64::NAN));

        state = plant_step(&vehicle, state, u, active_segment(&schedule, t)?)?;
        let segment = active_segment(&schedule, t_next)?;
        let (y, r) = measure(&spec, state, segment, &cfg.noise, (k + 1) as u64)?;
        reward = r;
        ensemble = ensemble.measured_update(&spec, y, r)?;

        records.push(StepRecord {
            t: t_next,
            v: state.v,
            u,
            v_star_true: spec.gamma(&segment.theta_true)?,
            gamma_mean_est: ensemble.gamma_stats(&spec)?.gamma_mean,
            exploit,
            explore,
            reward_meas: r,
            solve_time_ns: if cfg.harness.record_timing { elapsed } else { 0 },
            iterations,
        });
        u_prev = u;
    }

    let metrics = compute_metrics(&records, &schedule, &spec)?;
    Ok(RunResult {
        controller: kind,
        records,
        metrics,
        timing: TimingStats::from_samples(&times),
        reports,
        fallbacks,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t: f64, v: f64) -> StepRecord {
        StepRecord {
            t,
            v,
            u: 0.0,
            v_star_true: 0.0,
            gamma_mean_est: 0.0,
            exploit: 0.0,
            explore: 0.0,
            reward_meas: 0.0,
            solve_time_ns: 0,
            iterations: 0,
        }
    }

    fn one_segment(v_star: f64) -> (Vec<EnvSegment>, QuadraticRewardSpec) {
        let spec = QuadraticRewardSpec::default();
        let theta_true = spec.make_true_params(1.0, v_star, 1.0).unwrap();
        (vec![EnvSegment { t_start: 0.0, theta_true, disturbance_force: 0.0 }], spec)
    }

    #[test]
    fn metric_examples() {
        let (sched, spec) = one_segment(20.0);
        let perfect: Vec<_> = (1..=100).map(|k| record(k as f64 * 0.1, 20.0)).collect();
        let m = compute_metrics(&perfect, &sched, &spec).unwrap();
        assert_eq!((m.e_v, m.iae_v), (0.0, 0.0));
        assert!(m.regret.abs() < 1e-12);

        let off: Vec<_> = (1..=100).map(|k| record(k as f64 * 0.1, 20.5)).collect();
        assert!((compute_metrics(&off, &sched, &spec).unwrap().iae_v - 50.0).abs() < 1e-9);

        let off3: Vec<_> = (1..=100).map(|k| record(k as f64 * 0.1, 23.0)).collect();
        let m = compute_metrics(&off3, &sched, &spec).unwrap();
        assert!((m.regret - 1.0).abs() < 1e-9);
        assert!((m.e_v - 3.0).abs() < 1e-12);
        assert!(compute_metrics(&[], &sched, &spec).is_err());
    }

    #[test]
    fn timing_stats() {
        let s = TimingStats::from_samples(&(1..=100).collect::<Vec<u64>>());
        assert_eq!((s.count, s.max_ns, s.p99_ns), (100, 100, 99));
        assert!((s.mean_ns - 50.5).abs() < 1e-12);
        assert_eq!(TimingStats::from_samples(&[]), TimingStats::default());
    }

    #[test]
    fn one_step_horizon_gives_one_record() {
        for kind in ControllerKind::ALL {
            let mut cfg = ScenarioConfig::default().with_controller(kind);
            cfg.horizon_s = cfg.vehicle.dt;
            let r = run_closed_loop(&cfg).unwrap();
            assert_eq!(r.records.len(), 1);
            assert!((r.records[0].t - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_config_fails_before_stepping() {
        let mut cfg = ScenarioConfig::default();
        cfg.schedule[1].t_start = 1e6;
        assert!(run_closed_loop(&cfg).is_err());
    }

    #[test]
    fn records_carry_true_optimum_and_metrics_match() {
        let cfg = ScenarioConfig { horizon_s: 20.0, ..ScenarioConfig::default() };
        let r = run_closed_loop(&cfg).unwrap();
        assert_eq!(r.records.len(), 200);
        assert!(r.records.iter().all(|x| x.v_star_true == 25.0 && x.solve_time_ns == 0));
        let spec = cfg.reward_spec().unwrap();
        let m = compute_metrics(&r.records, &cfg.segments().unwrap(), &spec).unwrap();
        assert_eq!(m, r.metrics);
    }
}
