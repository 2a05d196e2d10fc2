//! Damped Gauss-Newton inner loop for least-squares residual maps.
//!
//! Each iteration linearizes the residual `F` at the current input and solves
//!
//! ```text
//! min_Δ ½‖F + JΔ‖² (+ ½λ‖Δ/s‖²)
//! ```
//!
//! which for the squared-norm outer loss is exactly the Gauss-Newton step on
//! the quadratic model `½ΔᵀJᵀJΔ + (JᵀF)ᵀΔ`. Damping is applied in inputs
//! normalized by the half-width `s` of the input box. Iterates are clamped to
//! the box and the loop stops on the relative step `‖Δ‖ / (1 + ‖u‖)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DceeError, Result};

/// A nonlinear residual map `u ↦ F(u)` with Jacobian `J(u) = ∂F/∂u`.
pub trait ResidualMap {
    fn input_dim(&self) -> usize;

    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>>;

    fn residual_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;

    /// `D(u) = ‖F(u)‖²`.
    fn objective(&self, u: &DVector<f64>) -> Result<f64> {
        Ok(self.residual(u)?.norm_squared())
    }
}

/// Maximum number of damping escalations per iteration.
pub const MAX_ESCALATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for GnConfig {
    fn default() -> Self {
        GnConfig { max_iters: 10, tol: 1e-6, damping: 1e-8, u_min: -5000.0, u_max: 5000.0 }
    }
}

impl GnConfig {
    pub fn with_bounds(u_min: f64, u_max: f64) -> Self {
        GnConfig { u_min, u_max, ..Default::default() }
    }

    pub fn unbounded() -> Self {
        Self::with_bounds(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(DceeError::Config("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(DceeError::Config(format!("tolerance must be > 0, got {}", self.tol)));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(DceeError::Config(format!("damping must be finite and >= 0, got {}", self.damping)));
        }
        if !(self.u_min < self.u_max) {
            return Err(DceeError::Config("u_min must be < u_max".into()));
        }
        Ok(())
    }

    /// Input normalization used for damping: half-width of the box, or 1 when
    /// the box is unbounded.
    pub fn input_scale(&self) -> f64 {
        let half = 0.5 * (self.u_max - self.u_min);
        if half.is_finite() {
            half
        } else {
            1.0
        }
    }

    fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        u.map(|x| x.clamp(self.u_min, self.u_max))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GnReport {
    pub iterations: usize,
    pub step_norms: Vec<f64>,
    /// `D` at the initial point and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Final relative step `‖Δu‖ / (1 + ‖u‖)`.
    pub stop_measure: f64,
    pub converged: bool,
    /// No damped step decreased the objective; the loop stopped early.
    pub stalled: bool,
    pub damping_escalations: usize,
    /// The controller fell back to the previous input.
    pub fallback: bool,
    pub solve_time_ns: u64,
}

/// Gauss-Newton curvature `JᵀJ`. Shared by the solver and the Hessian split.
pub fn gauss_newton_matrix(j: &DMatrix<f64>) -> DMatrix<f64> {
    j.tr_mul(j)
}

fn check_dims(f: &DVector<f64>, j: &DMatrix<f64>, damping: f64) -> Result<()> {
    if j.nrows() != f.len() {
        return Err(DceeError::InvalidInput(format!(
            "jacobian has {} rows but residual has {} entries",
            j.nrows(),
            f.len()
        )));
    }
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(DceeError::InvalidInput(format!("damping must be finite and >= 0, got {damping}")));
    }
    Ok(())
}

/// Solve `(JᵀJ + λI)Δ = −JᵀF` by Cholesky factorization.
pub fn gn_step(f: &DVector<f64>, j: &DMatrix<f64>, damping: f64) -> Result<DVector<f64>> {
    check_dims(f, j, damping)?;
    let mut b = gauss_newton_matrix(j);
    for i in 0..b.nrows() {
        b[(i, i)] += damping;
    }
    let scale = b.diagonal().amax();
    let chol = b.cholesky().ok_or(DceeError::RankDeficient)?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(scale > 0.0) || min_pivot <= f64::EPSILON * scale * l.nrows() as f64 {
        return Err(DceeError::RankDeficient);
    }
    let rhs = -j.tr_mul(f);
    Ok(chol.solve(&rhs))
}

/// Solve `min ‖F + JΔ‖² + λ‖Δ‖²` directly as a stacked linear least-squares
/// problem via Householder QR, without forming `JᵀJ`.
pub fn scp_step(f: &DVector<f64>, j: &DMatrix<f64>, damping: f64) -> Result<DVector<f64>> {
    check_dims(f, j, damping)?;
    let (m, n) = j.shape();
    let sqrt_l = damping.sqrt();
    let a = DMatrix::from_fn(m + n, n, |r, c| {
        if r < m {
            j[(r, c)]
        } else if r - m == c {
            sqrt_l
        } else {
            0.0
        }
    });
    let rhs = DVector::from_fn(m + n, |r, _| if r < m { -f[r] } else { 0.0 });
    if a.nrows() < n {
        return Err(DceeError::RankDeficient);
    }
    let qr = a.qr();
    let r = qr.r();
    let max_diag = r.diagonal().amax();
    if !(max_diag > 0.0) || r.diagonal().iter().any(|d| d.abs() <= f64::EPSILON * max_diag * (m + n) as f64) {
        return Err(DceeError::RankDeficient);
    }
    let qtb = qr.q().tr_mul(&rhs);
    r.solve_upper_triangular(&qtb).ok_or(DceeError::RankDeficient)
}

/// Next damping level after a rejected or infeasible step.
fn escalate(damping: f64, curvature: &DMatrix<f64>) -> f64 {
    let mean_diag = curvature.trace() / curvature.nrows().max(1) as f64;
    (10.0 * damping).max(1e-2 * mean_diag)
}

/// Run the Gauss-Newton loop from `u_init`.
///
/// A trial step is accepted when it is feasible and does not increase `D`,
/// or when it is already below the stopping tolerance. Otherwise the damping
/// is escalated (at most [`MAX_ESCALATIONS`] times). Persistent infeasibility
/// is a [`DceeError::SolverFailure`]; persistent non-decrease stops the loop
/// with `stalled` set.
pub fn solve<M: ResidualMap + ?Sized>(
    model: &M,
    u_init: &DVector<f64>,
    cfg: &GnConfig,
) -> Result<(DVector<f64>, GnReport)> {
    let start = Instant::now();
    cfg.validate()?;
    if u_init.len() != model.input_dim() {
        return Err(DceeError::InvalidInput(format!(
            "initial input has dimension {}, expected {}",
            u_init.len(),
            model.input_dim()
        )));
    }
    let mut report = GnReport { stop_measure: f64::INFINITY, ..Default::default() };
    let fail = |reason: String, mut report: GnReport| {
        report.solve_time_ns = start.elapsed().as_nanos() as u64;
        DceeError::SolverFailure { reason, report: Box::new(report) }
    };

    let scale = cfg.input_scale();
    let mut u = cfg.clamp(u_init);
    let (mut f, mut j) = match model.residual_and_jacobian(&u) {
        Ok(fj) => fj,
        Err(e) if e.is_infeasible() => return Err(fail(format!("initial point infeasible: {e}"), report)),
        Err(e) => return Err(e),
    };
    let mut obj = f.norm_squared();
    report.objective_trace.push(obj);

    while report.iterations < cfg.max_iters {
        report.iterations += 1;
        let j_scaled = &j * scale;
        let curvature = gauss_newton_matrix(&j_scaled);
        let mut damping = cfg.damping;
        let mut accepted = None;
        let mut any_feasible = false;

        for attempt in 0..=MAX_ESCALATIONS {
            if attempt > 0 {
                damping = escalate(damping, &curvature);
                report.damping_escalations += 1;
            }
            let delta = match gn_step(&f, &j_scaled, damping) {
                Ok(d) => d * scale,
                Err(DceeError::RankDeficient) => continue,
                Err(e) => return Err(e),
            };
            let candidate = cfg.clamp(&(&u + &delta));
            let step = (&candidate - &u).norm();
            let measure = step / (1.0 + u.norm());
            match model.residual_and_jacobian(&candidate) {
                Ok((fc, jc)) => {
                    any_feasible = true;
                    let obj_c = fc.norm_squared();
                    if measure <= cfg.tol || obj_c <= obj {
                        accepted = Some((candidate, fc, jc, obj_c, step, measure));
                        break;
                    }
                }
                Err(e) if e.is_infeasible() => {}
                Err(e) => return Err(e),
            }
        }

        match accepted {
            Some((candidate, fc, jc, obj_c, step, measure)) => {
                u = candidate;
                f = fc;
                j = jc;
                obj = obj_c;
                report.step_norms.push(step);
                report.objective_trace.push(obj);
                report.stop_measure = measure;
                if measure <= cfg.tol {
                    break;
                }
            }
            None if any_feasible => {
                report.stalled = true;
                break;
            }
            None => return Err(fail("every damped step was infeasible".into(), report)),
        }
    }

    report.converged = report.stop_measure <= cfg.tol;
    report.solve_time_ns = start.elapsed().as_nanos() as u64;
    Ok((u, report))
}

/// One real-time control step: warm-started solve that never fails. On a
/// solver error the previous input is returned and the report is flagged.
pub fn controller_step<M: ResidualMap + ?Sized>(model: &M, u_prev: f64, cfg: &GnConfig) -> (f64, GnReport) {
    let start = Instant::now();
    let init = DVector::from_element(model.input_dim(), u_prev);
    match solve(model, &init, cfg) {
        Ok((u, report)) => (u[0], report),
        Err(DceeError::SolverFailure { report, .. }) => {
            let mut report = *report;
            report.fallback = true;
            (u_prev, report)
        }
        Err(_) => {
            let report = GnReport {
                fallback: true,
                stop_measure: f64::INFINITY,
                solve_time_ns: start.elapsed().as_nanos() as u64,
                ..Default::default()
            };
            (u_prev, report)
        }
    }
}
