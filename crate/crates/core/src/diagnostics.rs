//! Second-order diagnostics and finite-difference oracles.
//!
//! The controller itself never forms second derivatives. The exact Hessian of
//! `L(u) = ½‖F(u)‖²` is taken here by central second differences and split as
//!
//! ```text
//! ∇²L = B + E,   B = JᵀJ,   E = Σᵢ Fᵢ ∇²Fᵢ
//! ```
//!
//! The local linear rate of the Gauss-Newton iteration at a minimizer is the
//! smallest `α` with `−αB ⪯ E ⪯ αB`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{init_ensemble, EnsembleInit};
use crate::error::{DceeError, Result};
use crate::plant::{PlantState, VehicleParams};
use crate::problem::{jacobian_fd, DceeProblem};
use crate::reward::QuadraticRewardSpec;
use crate::solver::{gauss_newton_matrix, ResidualMap};

/// Default finite-difference step `1e-4·(1 + ‖u‖∞)`.
pub fn fd_step(u: &DVector<f64>) -> f64 {
    1e-4 * (1.0 + u.amax())
}

fn half_objective<M: ResidualMap + ?Sized>(model: &M, u: &DVector<f64>) -> Result<f64> {
    Ok(0.5 * model.objective(u)?)
}

/// Central second differences of `L(u) = ½‖F(u)‖²`, symmetrized.
pub fn exact_hessian_fd<M: ResidualMap + ?Sized>(model: &M, u: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(DceeError::InvalidInput(format!("finite-difference step must be > 0, got {h}")));
    }
    let n = u.len();
    let shifted = |steps: &[(usize, f64)]| -> Result<f64> {
        let mut x = u.clone();
        for &(i, s) in steps {
            x[i] += s * h;
        }
        half_objective(model, &x)
    };
    let centre = half_objective(model, u)?;
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        hess[(i, i)] = (shifted(&[(i, 1.0)])? - 2.0 * centre + shifted(&[(i, -1.0)])?) / (h * h);
        for j in 0..i {
            let pp = shifted(&[(i, 1.0), (j, 1.0)])?;
            let pm = shifted(&[(i, 1.0), (j, -1.0)])?;
            let mp = shifted(&[(i, -1.0), (j, 1.0)])?;
            let mm = shifted(&[(i, -1.0), (j, -1.0)])?;
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianSplit {
    /// `B = JᵀJ`, the matrix the Gauss-Newton step factorizes.
    pub b_ggn: DMatrix<f64>,
    /// `E = H − B`.
    pub e_ggn: DMatrix<f64>,
    pub h_exact: DMatrix<f64>,
}

/// Split the finite-difference Hessian at `u` into its Gauss-Newton part and
/// the residual-curvature remainder.
pub fn ggn_split<M: ResidualMap + ?Sized>(model: &M, u: &DVector<f64>) -> Result<HessianSplit> {
    let (_, j) = model.residual_and_jacobian(u)?;
    let h_exact = exact_hessian_fd(model, u, fd_step(u))?;
    let b_ggn = gauss_newton_matrix(&j);
    let e_ggn = &h_exact - &b_ggn;
    Ok(HessianSplit { b_ggn, e_ggn, h_exact })
}

/// Largest absolute generalized eigenvalue of `(E, B)`; `|E|/B` when scalar.
pub fn alpha_rate(split: &HessianSplit) -> Result<f64> {
    let b = &split.b_ggn;
    let scale = b.amax();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(DceeError::RateUndefined);
    }
    let chol = b.clone().cholesky().ok_or(DceeError::RateUndefined)?;
    let l = chol.l();
    let min_pivot = l.diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    if min_pivot <= f64::EPSILON * scale * b.nrows() as f64 {
        return Err(DceeError::RateUndefined);
    }
    // L⁻¹ E L⁻ᵀ shares its eigenvalues with the pencil (E, B).
    let left = l.solve_lower_triangular(&split.e_ggn).ok_or(DceeError::RateUndefined)?;
    let m = l.solve_lower_triangular(&left.transpose()).ok_or(DceeError::RateUndefined)?;
    let m = 0.5 * (&m + m.transpose());
    Ok(SymmetricEigen::new(m).eigenvalues.amax())
}

/// Where the randomized audit instances are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditSetup {
    pub vehicle: VehicleParams,
    pub spec: QuadraticRewardSpec,
    pub ensemble: EnsembleInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    pub checked: usize,
    /// Instances where an evaluation or stencil point was infeasible.
    pub skipped: usize,
    /// Max of `‖J − J_fd‖ / max(‖J‖, ‖J_fd‖)`.
    pub max_jacobian_rel_err: f64,
    /// Max of `|JᵀF − ∇L_fd| / max(|JᵀF|, |∇L_fd|)`.
    pub max_gradient_rel_err: f64,
    /// Max of `|D − (exploit + explore)|`.
    pub max_decomposition_abs_err: f64,
}

impl AuditReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.checked > 0
            && self.max_jacobian_rel_err < rel_tol
            && self.max_gradient_rel_err < rel_tol
            && self.max_decomposition_abs_err < abs_tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let den = a.abs().max(b.abs());
    if den == 0.0 {
        0.0
    } else {
        (a - b).abs() / den
    }
}

struct AuditSample {
    jacobian: f64,
    gradient: f64,
    decomposition: f64,
}

fn audit_one(p: &DceeProblem<'_>, u: f64) -> Result<AuditSample> {
    let x = DVector::from_element(1, u);
    let h = fd_step(&x);
    let eval = p.evaluate(u)?;
    let j_fd = jacobian_fd(p, &x, h)?;
    let den = eval.jacobian.norm().max(j_fd.norm());
    let jacobian = if den == 0.0 { 0.0 } else { (&eval.jacobian - &j_fd).norm() / den };

    let grad = eval.jacobian.tr_mul(&eval.residual)[0];
    let grad_fd = (p.scaled_objective(u + h)? - p.scaled_objective(u - h)?) / (2.0 * h);

    let (exploit, explore) = p.objective_split(u)?;
    let decomposition = (eval.residual.norm_squared() - (exploit + explore)).abs();
    Ok(AuditSample { jacobian, gradient: rel_err(grad, grad_fd), decomposition })
}

/// Jacobian, gradient-identity and decomposition checks on randomized
/// `(state, ensemble, u)`. Failures are reported, not raised.
pub fn derivative_audit(setup: &AuditSetup, samples: usize, seed: u64) -> Result<AuditReport> {
    if samples < 1 {
        return Err(DceeError::InvalidInput("audit needs at least one sample".into()));
    }
    let spec = setup.spec;
    let vehicle = setup.vehicle;
    let v_hi = 1.5 * spec.v_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AuditReport {
        samples,
        checked: 0,
        skipped: 0,
        max_jacobian_rel_err: 0.0,
        max_gradient_rel_err: 0.0,
        max_decomposition_abs_err: 0.0,
    };
    for _ in 0..samples {
        let w_z = rng.random_range(0.5..2.0);
        let v_star = rng.random_range(0.2 * spec.v_scale..1.5 * spec.v_scale);
        let c_r = rng.random_range(-1.0..1.0);
        let init = EnsembleInit {
            prior_mean: spec.make_true_params(w_z, v_star, c_r)?,
            seed: rng.random(),
            ..setup.ensemble
        };
        let ensemble = init_ensemble(&spec, &init)?;
        // Keep the predicted speed away from the v = 0 kink so central
        // differences see a smooth map.
        let v = rng.random_range(0.2 * spec.v_scale..v_hi);
        let u = rng.random_range(vehicle.u_min..vehicle.u_max);
        let p = DceeProblem::new(vehicle, spec, &ensemble, PlantState::new(v));
        match audit_one(&p, u) {
            Ok(s) => {
                report.checked += 1;
                report.max_jacobian_rel_err = report.max_jacobian_rel_err.max(s.jacobian);
                report.max_gradient_rel_err = report.max_gradient_rel_err.max(s.gradient);
                report.max_decomposition_abs_err = report.max_decomposition_abs_err.max(s.decomposition);
            }
            Err(e) if e.is_infeasible() => report.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}
