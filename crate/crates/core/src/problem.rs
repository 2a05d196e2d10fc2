//! The candidate-input DCEE residual.
//!
//! For a candidate traction force `u` the controller predicts the next speed
//! `y(u)`, the candidate-induced ensemble `θ̂ⁱ(y)` and the predicted optimal
//! speeds `γ̂ⁱ = Γ(θ̂ⁱ)`. Stacking the tracking error and the scaled ensemble
//! deviations gives
//!
//! ```text
//! F(u) = [ y − γ̄ ,  (γ̂¹ − γ̄)/√N , … , (γ̂ᴺ − γ̄)/√N ]
//! D(u) = ‖F(u)‖² = (y − γ̄)² + tr Σ_γ
//! ```
//!
//! The Jacobian is assembled analytically by the chain rule
//! `u → y → θ̂ⁱ → γ̂ⁱ`; no second derivatives are formed.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{Ensemble, GradientPrediction, PredictionMap};
use crate::error::{DceeError, Result};
use crate::plant::{euler_speed, PlantState, VehicleParams};
use crate::reward::QuadraticRewardSpec;
use crate::solver::ResidualMap;

/// Snapshot of one control step: model, learned ensemble and measured state.
#[derive(Debug, Clone)]
pub struct DceeProblem<'a, P = GradientPrediction> {
    pub vehicle: VehicleParams,
    pub spec: QuadraticRewardSpec,
    pub ensemble: &'a Ensemble,
    pub state: PlantState,
    pub prediction: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEval {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub y_pred: f64,
    pub gamma_mean_pred: f64,
}

impl<'a> DceeProblem<'a, GradientPrediction> {
    pub fn new(vehicle: VehicleParams, spec: QuadraticRewardSpec, ensemble: &'a Ensemble, state: PlantState) -> Self {
        DceeProblem { vehicle, spec, ensemble, state, prediction: GradientPrediction }
    }
}

impl<'a, P: PredictionMap> DceeProblem<'a, P> {
    pub fn with_prediction<Q: PredictionMap>(self, prediction: Q) -> DceeProblem<'a, Q> {
        DceeProblem { vehicle: self.vehicle, spec: self.spec, ensemble: self.ensemble, state: self.state, prediction }
    }

    /// Residual length `(N + 1)·n_y`.
    pub fn residual_dim(&self) -> usize {
        self.ensemble.len() + 1
    }

    fn check_input(&self, u: f64) -> Result<()> {
        if u.is_finite() && self.state.v.is_finite() {
            Ok(())
        } else {
            Err(DceeError::InvalidInput(format!("non-finite candidate u = {u} or state v = {}", self.state.v)))
        }
    }

    /// One-step speed prediction on the nominal (disturbance-free) model.
    /// The input is not clamped here.
    pub fn predict_output(&self, u: f64) -> Result<f64> {
        self.check_input(u)?;
        Ok(euler_speed(&self.vehicle, self.state.v, u, 0.0).max(0.0))
    }

    /// `dy/du`; zero where the speed clamp at 0 is active.
    fn output_gain(&self, u: f64) -> f64 {
        if euler_speed(&self.vehicle, self.state.v, u, 0.0) > 0.0 {
            self.vehicle.input_gain()
        } else {
            0.0
        }
    }

    fn infeasible(u: f64, e: DceeError) -> DceeError {
        match e {
            DceeError::CurvatureViolation { .. } => {
                DceeError::InfeasibleCandidate { u, reason: format!("predicted member inadmissible ({e})") }
            }
            other => other,
        }
    }

    fn predicted_gammas(&self, u: f64) -> Result<(f64, Vec<f64>)> {
        let y = self.predict_output(u)?;
        let members = self.prediction.predict(self.ensemble, &self.spec, y)?;
        let gammas = members
            .iter()
            .map(|m| self.spec.gamma(m))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Self::infeasible(u, e))?;
        Ok((y, gammas))
    }

    /// Stacked residual `F(u)`.
    pub fn residual(&self, u: f64) -> Result<DVector<f64>> {
        let (y, gammas) = self.predicted_gammas(u)?;
        let n = gammas.len() as f64;
        let mean = gammas.iter().sum::<f64>() / n;
        let inv_sqrt_n = 1.0 / n.sqrt();
        let mut f = DVector::zeros(gammas.len() + 1);
        f[0] = y - mean;
        for (i, g) in gammas.iter().enumerate() {
            f[i + 1] = (g - mean) * inv_sqrt_n;
        }
        Ok(f)
    }

    /// Residual, analytic Jacobian and the predicted quantities behind them.
    pub fn evaluate(&self, u: f64) -> Result<ResidualEval> {
        let y = self.predict_output(u)?;
        let dy_du = self.output_gain(u);
        let predicted = self.prediction.predict_with_derivative(self.ensemble, &self.spec, y)?;
        let n = predicted.len();
        let mut gammas = Vec::with_capacity(n);
        let mut dgammas = Vec::with_capacity(n);
        for (theta, dtheta_dy) in &predicted {
            let gamma = self.spec.gamma(theta).map_err(|e| Self::infeasible(u, e))?;
            let grad = self.spec.gamma_jacobian(theta).map_err(|e| Self::infeasible(u, e))?;
            gammas.push(gamma);
            dgammas.push((grad * dtheta_dy)[0] * dy_du);
        }
        let nf = n as f64;
        let inv_sqrt_n = 1.0 / nf.sqrt();
        let gamma_mean = gammas.iter().sum::<f64>() / nf;
        let dgamma_mean = dgammas.iter().sum::<f64>() / nf;

        let mut residual = DVector::zeros(n + 1);
        let mut jacobian = DMatrix::zeros(n + 1, 1);
        residual[0] = y - gamma_mean;
        jacobian[(0, 0)] = dy_du - dgamma_mean;
        for i in 0..n {
            residual[i + 1] = (gammas[i] - gamma_mean) * inv_sqrt_n;
            jacobian[(i + 1, 0)] = (dgammas[i] - dgamma_mean) * inv_sqrt_n;
        }
        Ok(ResidualEval { residual, jacobian, y_pred: y, gamma_mean_pred: gamma_mean })
    }

    pub fn jacobian(&self, u: f64) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(u)?.jacobian)
    }

    /// `D(u) = ‖F(u)‖²`.
    pub fn objective(&self, u: f64) -> Result<f64> {
        Ok(self.residual(u)?.norm_squared())
    }

    /// `L(u) = ½‖F(u)‖²`, the least-squares scaling of `D`.
    pub fn scaled_objective(&self, u: f64) -> Result<f64> {
        Ok(0.5 * self.objective(u)?)
    }

    /// `(exploitation, exploration) = (‖y − γ̄‖², tr Σ_γ)` evaluated from the
    /// predicted ensemble statistics rather than from the stacked residual.
    pub fn objective_split(&self, u: f64) -> Result<(f64, f64)> {
        let y = self.predict_output(u)?;
        let predicted = Ensemble::new(self.prediction.predict(self.ensemble, &self.spec, y)?, self.ensemble.rates().to_vec())?;
        let stats = predicted.gamma_stats(&self.spec).map_err(|e| Self::infeasible(u, e))?;
        Ok(((y - stats.gamma_mean).powi(2), stats.trace()))
    }

    pub fn jacobian_fd(&self, u: f64, h: f64) -> Result<DMatrix<f64>> {
        jacobian_fd(self, &DVector::from_element(1, u), h)
    }
}

impl<P: PredictionMap> ResidualMap for DceeProblem<'_, P> {
    fn input_dim(&self) -> usize {
        1
    }

    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        DceeProblem::residual(self, u[0])
    }

    fn residual_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let eval = self.evaluate(u[0])?;
        Ok((eval.residual, eval.jacobian))
    }
}

/// Central-difference Jacobian `(F(u + h eⱼ) − F(u − h eⱼ)) / 2h`.
pub fn jacobian_fd<M: ResidualMap + ?Sized>(model: &M, u: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(DceeError::InvalidInput(format!("finite-difference step must be > 0, got {h}")));
    }
    let n = u.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut plus = u.clone();
        plus[j] += h;
        let mut minus = u.clone();
        minus[j] -= h;
        cols.push((model.residual(&plus)? - model.residual(&minus)?) / (2.0 * h));
    }
    Ok(DMatrix::from_columns(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{init_ensemble, EnsembleInit};
    use crate::reward::RewardParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> QuadraticRewardSpec {
        QuadraticRewardSpec::default()
    }

    fn random_ensemble(rng: &mut ChaCha8Rng, n: usize) -> Ensemble {
        let s = spec();
        let prior = s
            .make_true_params(rng.random_range(0.5..1.5), rng.random_range(12.0..30.0), rng.random_range(0.0..1.0))
            .unwrap();
        init_ensemble(
            &s,
            &EnsembleInit { prior_mean: prior, spread: [0.3; 3], n, eta_lo: 0.05, eta_hi: 0.5, seed: rng.random() },
        )
        .unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
    }

    #[test]
    fn predict_output_examples() {
        let e = Ensemble::new(vec![RewardParams::new([-1.0, 1.0, 0.0])], vec![0.1]).unwrap();
        let veh = VehicleParams::default();
        let p = DceeProblem::new(veh, spec(), &e, PlantState::new(20.0));
        assert!((p.predict_output(1000.0).unwrap() - 20.0426667).abs() < 1e-7);
        assert_eq!(p.predict_output(veh.drag(20.0)).unwrap(), 20.0);
        assert_eq!(p.predict_output(1234.5).unwrap(), p.predict_output(1234.5).unwrap());
        // Prediction is not clamped to the actuator box.
        assert!(p.predict_output(2.0 * veh.u_max).unwrap() > p.predict_output(veh.u_max).unwrap());
        assert!(p.predict_output(f64::NAN).is_err());
    }

    #[test]
    fn zero_residual_at_consensus_optimum() {
        let s = spec();
        let theta = s.make_true_params(1.0, 22.0, 1.0).unwrap();
        let e = Ensemble::new(vec![theta; 4], vec![0.05, 0.1, 0.2, 0.5]).unwrap();
        let veh = VehicleParams::default();
        let v = 20.0;
        // u such that y = 22 exactly.
        let u = veh.drag(v) + (22.0 - v) / veh.input_gain();
        let p = DceeProblem::new(veh, s, &e, PlantState::new(v));
        let f = p.residual(u).unwrap();
        assert!(f.norm() < 1e-10, "{f}");
        assert!(p.objective(u).unwrap() < 1e-20);
        let (ex, er) = p.objective_split(u).unwrap();
        assert!(ex < 1e-20 && er == 0.0);
        // Consensus: the uncertainty rows of the Jacobian vanish.
        let j = p.jacobian(u).unwrap();
        assert!(j.rows(1, 4).iter().all(|&x| x == 0.0));
        assert!((j[(0, 0)] - veh.input_gain()).abs() < 1e-18);
    }

    #[test]
    fn singleton_has_no_uncertainty_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_ensemble(&mut rng, 1);
        let p = DceeProblem::new(VehicleParams::default(), spec(), &e, PlantState::new(18.0));
        for u in [-3000.0, 0.0, 800.0, 4000.0] {
            let ev = p.evaluate(u).unwrap();
            assert_eq!(ev.residual.len(), 2);
            assert_eq!(ev.residual[1], 0.0);
            assert_eq!(ev.jacobian[(1, 0)], 0.0);
        }
    }

    #[test]
    fn two_member_hand_example() {
        // Rates tiny enough that the predicted update is negligible: γ̂ ≈ {10, 20}.
        let s = spec();
        let e = Ensemble::new(
            vec![s.make_true_params(1.0, 10.0, 0.0).unwrap(), s.make_true_params(1.0, 20.0, 0.0).unwrap()],
            vec![1e-300, 1e-300],
        )
        .unwrap();
        let veh = VehicleParams::default();
        let v = 12.0;
        let p = DceeProblem::new(veh, s, &e, PlantState::new(v));
        let u = veh.drag(v);
        let f = p.residual(u).unwrap();
        let expect = [-3.0, -5.0 / 2f64.sqrt(), 5.0 / 2f64.sqrt()];
        for (a, b) in f.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{f}");
        }
        assert!((p.objective(u).unwrap() - 34.0).abs() < 1e-10);
        let (ex, er) = p.objective_split(u).unwrap();
        assert!((ex - 9.0).abs() < 1e-10 && (er - 25.0).abs() < 1e-10);
    }

    #[test]
    fn decomposition_and_nonnegativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 100 {
            let n = rng.random_range(1..12);
            let e = random_ensemble(&mut rng, n);
            let p = DceeProblem::new(VehicleParams::default(), spec(), &e, PlantState::new(rng.random_range(5.0..35.0)));
            let u = rng.random_range(-5000.0..5000.0);
            let (Ok(d), Ok((ex, er))) = (p.objective(u), p.objective_split(u)) else { continue };
            assert!((d - (ex + er)).abs() < 1e-10);
            assert!(ex >= 0.0 && er >= 0.0);
            checked += 1;
        }
    }

    #[test]
    fn analytic_jacobian_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 100 {
            let n = rng.random_range(1..12);
            let e = random_ensemble(&mut rng, n);
            let p = DceeProblem::new(VehicleParams::default(), spec(), &e, PlantState::new(rng.random_range(5.0..35.0)));
            let u: f64 = rng.random_range(-5000.0..5000.0);
            let Ok(j) = p.jacobian(u) else { continue };
            let Ok(fd) = p.jacobian_fd(u, 1.0) else { continue };
            assert!(rel(&j, &fd) < 1e-6, "u = {u}: {j} vs {fd}");
            checked += 1;
        }
    }

    #[test]
    fn fd_is_exact_on_affine_maps_and_second_order() {
        struct Lin;
        impl ResidualMap for Lin {
            fn input_dim(&self) -> usize {
                1
            }
            fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
                Ok(DVector::from_vec(vec![3.0 * u[0] + 1.0, -0.5 * u[0] - 2.0]))
            }
            fn residual_and_jacobian(&self, _: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
                unreachable!()
            }
        }
        let fd = jacobian_fd(&Lin, &DVector::from_element(1, 0.7), 1e-3).unwrap();
        assert!((fd[(0, 0)] - 3.0).abs() < 1e-12 && (fd[(1, 0)] + 0.5).abs() < 1e-12);
        assert!(jacobian_fd(&Lin, &DVector::from_element(1, 0.7), 0.0).is_err());

        // Halving h cuts the error roughly fourfold on a smooth instance.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let e = random_ensemble(&mut rng, 6);
        let p = DceeProblem::new(VehicleParams::default(), spec(), &e, PlantState::new(17.0));
        let u = 2500.0;
        let j = p.jacobian(u).unwrap();
        let err = |h: f64| (p.jacobian_fd(u, h).unwrap() - &j).norm();
        let (e1, e2) = (err(400.0), err(200.0));
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio} ({e1} / {e2})");
    }

    #[test]
    fn gradient_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let n = rng.random_range(2..12);
            let e = random_ensemble(&mut rng, n);
            let p = DceeProblem::new(VehicleParams::default(), spec(), &e, PlantState::new(rng.random_range(5.0..35.0)));
            let u: f64 = rng.random_range(-4000.0..4000.0);
            let Ok(ev) = p.evaluate(u) else { continue };
            let grad = (ev.jacobian.transpose() * &ev.residual)[0];
            let h = 1.0;
            let (Ok(lp), Ok(lm)) = (p.scaled_objective(u + h), p.scaled_objective(u - h)) else { continue };
            let fd = (lp - lm) / (2.0 * h);
            assert!((grad - fd).abs() <= 1e-6 * grad.abs().max(fd.abs()), "{grad} vs {fd}");
        }
    }

    #[test]
    fn linearized_model_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..50 {
            let e = random_ensemble(&mut rng, 8);
            let p = DceeProblem::new(VehicleParams::default(), spec(), &e, PlantState::new(rng.random_range(5.0..35.0)));
            let Ok(ev) = p.evaluate(rng.random_range(-4000.0..4000.0)) else { continue };
            let model = |d: f64| (&ev.residual + &ev.jacobian * d).norm_squared();
            for _ in 0..20 {
                let a: f64 = rng.random_range(-5000.0..5000.0);
                let b: f64 = rng.random_range(-5000.0..5000.0);
                let mid = model(0.5 * (a + b));
                assert!(mid <= 0.5 * (model(a) + model(b)) + 1e-12);
            }
        }
    }

    #[test]
    fn exploration_scales_quadratically_with_deviations() {
        // Scaling every member's deviation of θ₁ from the mean by c scales each γ deviation
        // by c at fixed curvature; with a tiny rate the predicted update is the identity.
        let s = spec();
        let base = [s.make_true_params(1.0, 18.0, 0.0).unwrap(), s.make_true_params(1.0, 24.0, 0.0).unwrap()];
        let mean1 = 0.5 * (base[0][1] + base[1][1]);
        let scaled = |c: f64| -> Ensemble {
            let members = base
                .iter()
                .map(|m| RewardParams::new([m[0], mean1 + c * (m[1] - mean1), m[2]]))
                .collect();
            Ensemble::new(members, vec![1e-300; 2]).unwrap()
        };
        let veh = VehicleParams::default();
        let e1 = scaled(1.0);
        let e3 = scaled(3.0);
        let p1 = DceeProblem::new(veh, s, &e1, PlantState::new(20.0));
        let p3 = DceeProblem::new(veh, s, &e3, PlantState::new(20.0));
        let (_, x1) = p1.objective_split(500.0).unwrap();
        let (_, x3) = p3.objective_split(500.0).unwrap();
        assert!((x3 - 9.0 * x1).abs() < 1e-9 * x3);
    }

    #[test]
    fn infeasible_candidate_surfaces_as_error() {
        let s = QuadraticRewardSpec::new(1.0, 0.05).unwrap();
        let e = Ensemble::new(
            vec![RewardParams::new([-0.06, 0.0, 0.0]), RewardParams::new([-0.06, 4.0, 0.0])],
            vec![1.0, 1.0],
        )
        .unwrap();
        let veh = VehicleParams { mass: 1.0, dt: 1.0, c0: 0.0, c1: 0.0, c2: 0.0, ..VehicleParams::default() };
        let p = DceeProblem::new(veh, s, &e, PlantState::new(0.0));
        // u = 1 gives y = 1, where the first predicted member loses concavity.
        assert!(p.residual(1.0).unwrap_err().is_infeasible());
        assert!(p.evaluate(1.0).unwrap_err().is_infeasible());
        assert!(p.objective_split(1.0).unwrap_err().is_infeasible());
    }
}
