//! Solver timing on the closed loop. At every step of the default controller
//! the same subproblem is solved three ways from the same warm start:
//! Gauss-Newton with the analytic Jacobian, Gauss-Newton with a
//! central-difference Jacobian, and damped Newton on a finite-difference
//! Hessian.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{exact_hessian_fd, fd_step};
use crate::error::{DceeError, Result};
use crate::harness::config::{ControllerKind, ScenarioConfig};
use crate::harness::run::{run_closed_loop_observed, TimingStats};
use crate::problem::jacobian_fd;
use crate::solver::{solve, GnConfig, GnReport, ResidualMap, MAX_ESCALATIONS};

/// Wraps a residual map and replaces its Jacobian by central differences.
pub struct FdJacobian<'m, M: ?Sized>(pub &'m M);

impl<M: ResidualMap + ?Sized> ResidualMap for FdJacobian<'_, M> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.0.residual(u)
    }

    fn residual_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let f = self.0.residual(u)?;
        let j = jacobian_fd(self.0, u, fd_step(u))?;
        Ok((f, j))
    }
}

/// Relative step of the central-difference gradient, about `ε^{1/3}`.
const GRADIENT_STEP: f64 = 6e-6;

fn fd_gradient<M: ResidualMap + ?Sized>(model: &M, u: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(u.len());
    for i in 0..u.len() {
        let mut plus = u.clone();
        plus[i] += h;
        let mut minus = u.clone();
        minus[i] -= h;
        g[i] = 0.25 * (model.objective(&plus)? - model.objective(&minus)?) / h;
    }
    Ok(g)
}

/// Damped Newton on `L = ½‖F‖²` with finite-difference gradient and Hessian.
/// Same stopping rule, box and damping normalization as [`solve`]; an
/// indefinite Hessian is shifted by escalating the damping.
pub fn newton_fd_solve<M: ResidualMap + ?Sized>(
    model: &M,
    u_init: &DVector<f64>,
    cfg: &GnConfig,
) -> Result<(DVector<f64>, GnReport)> {
    let start = Instant::now();
    cfg.validate()?;
    let scale = cfg.input_scale();
    let clamp = |u: &DVector<f64>| u.map(|x| x.clamp(cfg.u_min, cfg.u_max));
    let mut u = clamp(u_init);
    let mut obj = model.objective(&u)?;
    let mut report = GnReport { stop_measure: f64::INFINITY, objective_trace: vec![obj], ..Default::default() };

    while report.iterations < cfg.max_iters {
        report.iterations += 1;
        let grad = fd_gradient(model, &u, GRADIENT_STEP * (1.0 + u.amax()))? * scale;
        let hess = exact_hessian_fd(model, &u, fd_step(&u))? * (scale * scale);
        let mean_diag = (hess.trace() / hess.nrows() as f64).abs();
        let mut damping = cfg.damping;
        let mut accepted = None;
        for attempt in 0..=MAX_ESCALATIONS + 5 {
            if attempt > 0 {
                damping = (10.0 * damping).max(1e-2 * mean_diag);
                report.damping_escalations += 1;
            }
            let shifted = &hess + DMatrix::identity(hess.nrows(), hess.ncols()) * damping;
            let Some(chol) = shifted.cholesky() else { continue };
            let delta = chol.solve(&(-&grad)) * scale;
            let candidate = clamp(&(&u + &delta));
            let step = (&candidate - &u).norm();
            let measure = step / (1.0 + u.norm());
            match model.objective(&candidate) {
                Ok(obj_c) if measure <= cfg.tol || obj_c <= obj => {
                    accepted = Some((candidate, obj_c, step, measure));
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_infeasible() => {}
                Err(e) => return Err(e),
            }
        }
        let Some((candidate, obj_c, step, measure)) = accepted else {
            report.stalled = true;
            break;
        };
        u = candidate;
        obj = obj_c;
        report.step_norms.push(step);
        report.objective_trace.push(obj);
        report.stop_measure = measure;
        if measure <= cfg.tol {
            break;
        }
    }
    report.converged = report.stop_measure <= cfg.tol;
    report.solve_time_ns = start.elapsed().as_nanos() as u64;
    Ok((u, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub solves: usize,
    pub analytic_gn: TimingStats,
    pub fd_jacobian_gn: TimingStats,
    pub fd_hessian_newton: TimingStats,
    /// Mean time of the reference divided by the analytic mean.
    pub speedup_vs_fd_jacobian: f64,
    pub speedup_vs_fd_newton: f64,
    /// Largest `|D_ref − D_gn| / max(D_ref, D_gn)` over all steps.
    pub max_objective_rel_gap: f64,
    /// Steps where a reference could not be solved at all.
    pub reference_failures: usize,
}

impl BenchReport {
    pub fn objectives_agree(&self, rel_tol: f64) -> bool {
        self.max_objective_rel_gap <= rel_tol && self.reference_failures == 0
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-12 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

/// Time the three solvers over `repetitions` closed-loop runs of the
/// numerical controller.
pub fn bench_solver(cfg: &ScenarioConfig, repetitions: usize) -> Result<BenchReport> {
    if repetitions < 1 {
        return Err(DceeError::InvalidInput("repetitions must be >= 1".into()));
    }
    let cfg = cfg.clone().with_controller(ControllerKind::NumericalDcee);
    let gn = cfg.gn_config();
    let mut analytic = Vec::new();
    let mut fd_jac = Vec::new();
    let mut newton = Vec::new();
    let mut max_gap: f64 = 0.0;
    let mut failures = 0;
    let mut inner_error = None;

    for _ in 0..repetitions {
        let mut observer = |_: usize, p: &crate::problem::DceeProblem<'_>, u_prev: f64, _: f64| {
            let init = DVector::from_element(1, u_prev);
            let timed = |f: &dyn Fn() -> Result<(DVector<f64>, GnReport)>| {
                let start = Instant::now();
                let out = f();
                (out, start.elapsed().as_nanos() as u64)
            };
            let (a, ta) = timed(&|| solve(p, &init, &gn));
            let (b, tb) = timed(&|| solve(&FdJacobian(p), &init, &gn));
            let (c, tc) = timed(&|| newton_fd_solve(p, &init, &gn));
            analytic.push(ta);
            fd_jac.push(tb);
            newton.push(tc);
            let Ok((ua, _)) = a else {
                failures += 1;
                return;
            };
            let da = match p.objective(ua[0]) {
                Ok(d) => d,
                Err(e) => {
                    inner_error.get_or_insert(e);
                    return;
                }
            };
            for reference in [b, c] {
                match reference.and_then(|(u, _)| p.objective(u[0])) {
                    Ok(d) => max_gap = max_gap.max(rel_gap(da, d)),
                    Err(_) => failures += 1,
                }
            }
        };
        run_closed_loop_observed(&cfg, &mut observer)?;
    }
    if let Some(e) = inner_error {
        return Err(e);
    }

    let a = TimingStats::from_samples(&analytic);
    let b = TimingStats::from_samples(&fd_jac);
    let c = TimingStats::from_samples(&newton);
    Ok(BenchReport {
        repetitions,
        solves: analytic.len(),
        speedup_vs_fd_jacobian: b.mean_ns / a.mean_ns,
        speedup_vs_fd_newton: c.mean_ns / a.mean_ns,
        analytic_gn: a,
        fd_jacobian_gn: b,
        fd_hessian_newton: c,
        max_objective_rel_gap: max_gap,
        reference_failures: failures,
    })
}
