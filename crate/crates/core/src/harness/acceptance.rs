//! The nine acceptance criteria as library checks. Each returns a pass flag
//! and a one-line detail; the `check` subcommand and the `acceptance` test
//! target both run them.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{alpha_rate, derivative_audit, ggn_split};
use crate::ensemble::{init_ensemble, Ensemble, EnsembleInit};
use crate::error::{DceeError, Result};
use crate::harness::bench::bench_solver;
use crate::harness::config::{ControllerKind, ScenarioConfig};
use crate::harness::export::to_csv_string;
use crate::harness::run::{run_closed_loop, run_closed_loop_observed, RunResult};
use crate::plant::PlantState;
use crate::problem::DceeProblem;
use crate::solver::{gauss_newton_matrix, gn_step, scp_step, solve, GnConfig};

pub const AUDIT_SAMPLES: usize = 100;
pub const AUDIT_REL_TOL: f64 = 1e-6;
pub const AUDIT_TIME_LIMIT_S: f64 = 5.0;
pub const DECOMPOSITION_ABS_TOL: f64 = 1e-10;
pub const NORMAL_EQUATION_TOL: f64 = 1e-10;
pub const PATH_AGREEMENT_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-10;
pub const GRID_INSTANCES: usize = 50;
pub const GRID_STEP: f64 = 0.5;
pub const GRID_REL_TOL: f64 = 1e-6;
pub const GRID_TIME_LIMIT_S: f64 = 30.0;
pub const TRACKING_TOL: f64 = 0.1;
pub const SETTLING_S: f64 = 60.0;
pub const MEAN_TIME_LIMIT_NS: f64 = 1e6;
pub const MAX_TIME_LIMIT_NS: u64 = 5_000_000;

const SEED: u64 = 20_240_601;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed_s: f64,
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "criterion {} {:<24} {verdict} ({:.2} s) {}", self.id, self.name, self.elapsed_s, self.detail)
    }
}

fn outcome(id: u8, name: &str, start: Instant, result: Result<(bool, String)>) -> CriterionOutcome {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionOutcome { id, name: name.into(), passed, detail, elapsed_s: start.elapsed().as_secs_f64() }
}

/// Randomized DCEE subproblems drawn like the derivative audit. With
/// `near_optimum` the speed lies within 0.5 m/s of the prior optimum and the
/// prior spread is drawn as well, so interior minimizers are common; with a
/// wide spread the exploration term drives most solutions onto the box.
fn random_problem_parts(
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    near_optimum: bool,
) -> Result<(Ensemble, PlantState, f64)> {
    let spec = cfg.reward_spec()?;
    let vehicle = cfg.vehicle;
    let v_star = rng.random_range(0.2 * spec.v_scale..1.5 * spec.v_scale);
    let init = EnsembleInit {
        prior_mean: spec.make_true_params(rng.random_range(0.5..2.0), v_star, rng.random_range(-1.0..1.0))?,
        seed: rng.random(),
        ..cfg.ensemble_init()?
    };
    let init = if near_optimum { EnsembleInit { spread: [rng.random_range(0.01..0.3); 3], ..init } } else { init };
    let ensemble = init_ensemble(&spec, &init)?;
    let v = if near_optimum {
        (v_star + rng.random_range(-0.5..0.5)).max(0.0)
    } else {
        rng.random_range(0.2 * spec.v_scale..1.5 * spec.v_scale)
    };
    let u = rng.random_range(vehicle.u_min..vehicle.u_max);
    Ok((ensemble, PlantState::new(v), u))
}

pub fn criterion_1_derivative_audit() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let setup = ScenarioConfig::default().audit_setup()?;
        let r = derivative_audit(&setup, AUDIT_SAMPLES, SEED)?;
        let secs = start.elapsed().as_secs_f64();
        let passed = r.checked == AUDIT_SAMPLES
            && r.max_jacobian_rel_err < AUDIT_REL_TOL
            && r.max_gradient_rel_err < AUDIT_REL_TOL
            && secs < AUDIT_TIME_LIMIT_S;
        let detail = format!(
            "checked {}/{}, jacobian rel err {:.2e}, gradient rel err {:.2e}",
            r.checked, r.samples, r.max_jacobian_rel_err, r.max_gradient_rel_err
        );
        Ok((passed, detail))
    })();
    outcome(1, "derivative audit", start, result)
}

pub fn criterion_2_decomposition() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let setup = ScenarioConfig::default().audit_setup()?;
        let r = derivative_audit(&setup, AUDIT_SAMPLES, SEED + 1)?;
        let passed = r.checked == AUDIT_SAMPLES && r.max_decomposition_abs_err < DECOMPOSITION_ABS_TOL;
        Ok((passed, format!("checked {}/{}, max |D − split| {:.2e}", r.checked, r.samples, r.max_decomposition_abs_err)))
    })();
    outcome(2, "decomposition identity", start, result)
}

pub fn criterion_3_gn_correctness() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let cfg = ScenarioConfig::default();
        let gn = cfg.gn_config();
        let scale = gn.input_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
        let mut systems: Vec<(DVector<f64>, DMatrix<f64>, f64)> = Vec::new();
        for _ in 0..100 {
            let m = rng.random_range(1..8);
            let n = rng.random_range(1..=m.min(4));
            let j = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let f = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            systems.push((f, j, rng.random_range(0.0..1e-2)));
        }
        while systems.len() < 200 {
            let (ensemble, state, u) = random_problem_parts(&cfg, &mut rng, false)?;
            let p = DceeProblem::new(cfg.vehicle, cfg.reward_spec()?, &ensemble, state);
            let Ok(eval) = p.evaluate(u) else { continue };
            systems.push((eval.residual, eval.jacobian * scale, gn.damping));
        }

        let (mut normal, mut agree, mut min_eig) = (0.0_f64, 0.0_f64, f64::INFINITY);
        for (f, j, damping) in &systems {
            let b = gauss_newton_matrix(j);
            min_eig = min_eig.min(SymmetricEigen::new(b.clone()).eigenvalues.min());
            let d_gn = gn_step(f, j, *damping)?;
            let d_scp = scp_step(f, j, *damping)?;
            let shifted = &b + DMatrix::identity(b.nrows(), b.ncols()) * *damping;
            normal = normal.max((shifted * &d_gn + j.tr_mul(f)).norm());
            agree = agree.max((&d_scp - &d_gn).norm() / d_gn.norm().max(1.0));
        }
        let passed = normal < NORMAL_EQUATION_TOL && agree < PATH_AGREEMENT_TOL && min_eig >= -PSD_TOL;
        let detail = format!(
            "{} systems, normal-equation residual {normal:.2e}, SCP/GN gap {agree:.2e}, min eig(JᵀJ) {min_eig:.2e}",
            systems.len()
        );
        Ok((passed, detail))
    })();
    outcome(3, "gauss-newton correctness", start, result)
}

fn grid_minimum(p: &DceeProblem<'_>, gn: &GnConfig) -> Option<(f64, f64)> {
    let n = ((gn.u_max - gn.u_min) / GRID_STEP).round() as usize;
    (0..=n)
        .filter_map(|i| {
            let u = (gn.u_min + i as f64 * GRID_STEP).min(gn.u_max);
            p.objective(u).ok().map(|d| (u, d))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

pub fn criterion_4_global_quality() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let cfg = ScenarioConfig::default();
        let gn = cfg.gn_config();
        let spec = cfg.reward_spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
        let (mut done, mut worst, mut failures, mut interior) = (0, f64::NEG_INFINITY, 0, 0);
        while done < GRID_INSTANCES {
            let (ensemble, state, u0) = random_problem_parts(&cfg, &mut rng, true)?;
            let p = DceeProblem::new(cfg.vehicle, spec, &ensemble, state);
            if p.objective(u0).is_err() {
                continue;
            }
            let Some((_, d_grid)) = grid_minimum(&p, &gn) else { continue };
            done += 1;
            let d_gn = solve(&p, &DVector::from_element(1, u0), &gn).and_then(|(u, _)| Ok((u[0], p.objective(u[0])?)));
            match d_gn {
                Ok((u, d)) => {
                    interior += (u > gn.u_min && u < gn.u_max) as usize;
                    let excess = (d - d_grid) / d_grid.abs().max(f64::MIN_POSITIVE);
                    worst = worst.max(excess);
                    failures += (d > d_grid * (1.0 + GRID_REL_TOL)) as usize;
                }
                Err(_) => failures += 1,
            }
        }
        let secs = start.elapsed().as_secs_f64();
        let passed = failures == 0 && secs < GRID_TIME_LIMIT_S;
        let detail = format!(
            "{failures}/{GRID_INSTANCES} above grid minimum ({interior} interior solutions), worst relative excess {worst:.2e}"
        );
        Ok((passed, detail))
    })();
    outcome(4, "global-quality oracle", start, result)
}

/// Per-segment tracking errors of a run: `(max |v − v*| after settling,
/// |γ̄ − v*| at the segment end)`.
pub fn segment_tracking(run: &RunResult) -> Result<Vec<(f64, f64)>> {
    let cfg = &run.config;
    let horizon = cfg.horizon_s;
    let schedule = cfg.segments()?;
    let eps = 1e-9;
    let mut out = Vec::new();
    for (i, seg) in schedule.iter().enumerate() {
        let t_end = schedule.get(i + 1).map_or(horizon, |s| s.t_start);
        let inside: Vec<_> = run.records.iter().filter(|r| r.t > seg.t_start + eps && r.t < t_end - eps).collect();
        let last = inside.last().ok_or_else(|| DceeError::InvalidInput(format!("segment {i} has no records")))?;
        let settled = inside
            .iter()
            .filter(|r| r.t > seg.t_start + SETTLING_S)
            .map(|r| (r.v - r.v_star_true).abs())
            .fold(0.0, f64::max);
        out.push((settled, (last.gamma_mean_est - last.v_star_true).abs()));
    }
    Ok(out)
}

pub fn criterion_5_convergence() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let cfg = ScenarioConfig::default().noise_free();
        let run = run_closed_loop(&cfg)?;
        let errors = segment_tracking(&run)?;
        let passed = errors.iter().all(|&(v, g)| v < TRACKING_TOL && g < TRACKING_TOL);
        let detail = errors
            .iter()
            .enumerate()
            .map(|(i, (v, g))| format!("seg {}: max|v−v*| {v:.3}, |γ̄−v*| {g:.3}", i + 1))
            .collect::<Vec<_>>()
            .join("; ");
        Ok((passed, detail))
    })();
    outcome(5, "closed-loop convergence", start, result)
}

pub fn criterion_6_ordering() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let cfg = ScenarioConfig::default();
        let run = |kind| run_closed_loop(&cfg.clone().with_controller(kind)).map(|r| r.metrics);
        let num = run(ControllerKind::NumericalDcee)?;
        let grad = run(ControllerKind::GradDcee)?;
        let esc = run(ControllerKind::Esc)?;
        let passed = num.regret < grad.regret && num.regret < esc.regret && num.iae_v < esc.iae_v;
        let detail = format!(
            "regret num {:.2} / grad {:.2} / esc {:.2}; IAE num {:.1} / esc {:.1}",
            num.regret, grad.regret, esc.regret, num.iae_v, esc.iae_v
        );
        Ok((passed, detail))
    })();
    outcome(6, "comparative ordering", start, result)
}

/// Operating point at the final step of a run: ensemble, state and the
/// previous input.
fn final_operating_point(cfg: &ScenarioConfig) -> Result<(Ensemble, PlantState, f64)> {
    let steps = cfg.steps()?;
    let mut captured = None;
    let mut observer = |k: usize, p: &DceeProblem<'_>, u_prev: f64, _: f64| {
        if k + 1 == steps {
            captured = Some((p.ensemble.clone(), p.state, u_prev));
        }
    };
    run_closed_loop_observed(cfg, &mut observer)?;
    captured.ok_or_else(|| DceeError::InvalidInput("run produced no steps".into()))
}

pub fn criterion_7_local_rate() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let cfg = ScenarioConfig::default().noise_free();
        let (ensemble, state, u_prev) = final_operating_point(&cfg)?;
        let p = DceeProblem::new(cfg.vehicle, cfg.reward_spec()?, &ensemble, state);
        let base = cfg.gn_config();
        let tight = GnConfig { max_iters: 200, tol: 1e-13, ..base };
        let (u_star, _) = solve(&p, &DVector::from_element(1, u_prev), &tight)?;
        let alpha = alpha_rate(&ggn_split(&p, &u_star)?)?;

        let perturbed = DVector::from_element(1, u_star[0] + 0.05 * base.input_scale());
        let trace = GnConfig { max_iters: 200, tol: 1e-10, ..base };
        let (_, report) = solve(&p, &perturbed, &trace)?;
        let norms = &report.step_norms;
        let tail = &norms[norms.len().saturating_sub(3)..];
        let decreasing = tail.len() == 3 && tail.windows(2).all(|w| w[1] < w[0]);
        let passed = alpha < 1.0 && decreasing;
        let detail = format!(
            "u* = {:.3} N, alpha = {alpha:.4}, {} iterations, last steps {:?}",
            u_star[0],
            report.iterations,
            tail.iter().map(|s| format!("{s:.2e}")).collect::<Vec<_>>()
        );
        Ok((passed, detail))
    })();
    outcome(7, "local-rate diagnostic", start, result)
}

pub fn criterion_8_performance() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let r = bench_solver(&ScenarioConfig::default(), 1)?;
        let a = r.analytic_gn;
        let passed = a.mean_ns < MEAN_TIME_LIMIT_NS
            && a.max_ns < MAX_TIME_LIMIT_NS
            && a.mean_ns < r.fd_hessian_newton.mean_ns;
        let detail = format!(
            "analytic mean {:.1} µs, max {:.1} µs; FD-Hessian Newton mean {:.1} µs ({:.2}x), FD-Jacobian GN {:.2}x",
            a.mean_ns / 1e3,
            a.max_ns as f64 / 1e3,
            r.fd_hessian_newton.mean_ns / 1e3,
            r.speedup_vs_fd_newton,
            r.speedup_vs_fd_jacobian
        );
        Ok((passed, detail))
    })();
    outcome(8, "performance envelope", start, result)
}

pub fn criterion_9_determinism() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let cfg = ScenarioConfig::default();
        let first = to_csv_string(&run_closed_loop(&cfg)?.records)?;
        let second = to_csv_string(&run_closed_loop(&cfg)?.records)?;
        Ok((first == second, format!("{} bytes, identical: {}", first.len(), first == second)))
    })();
    outcome(9, "determinism", start, result)
}

pub fn run_all() -> Vec<CriterionOutcome> {
    vec![
        criterion_1_derivative_audit(),
        criterion_2_decomposition(),
        criterion_3_gn_correctness(),
        criterion_4_global_quality(),
        criterion_5_convergence(),
        criterion_6_ordering(),
        criterion_7_local_rate(),
        criterion_8_performance(),
        criterion_9_determinism(),
    ]
}

/// The oracle subset run by `audit`: criteria 1 to 4.
pub fn run_oracles() -> Vec<CriterionOutcome> {
    vec![
        criterion_1_derivative_audit(),
        criterion_2_decomposition(),
        criterion_3_gn_correctness(),
        criterion_4_global_quality(),
    ]
}
