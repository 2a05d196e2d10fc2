//! Multi-estimator active learning.
//!
//! Each member runs a plain LMS (gradient) update on the measured reward.
//! For a candidate output the same rule is applied with the unmeasured
//! reward replaced by the ensemble-mean prediction, which yields the
//! candidate-dependent members `θ̂ⁱ(y)` used by the controller objective.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DceeError, Result};
use crate::reward::{QuadraticRewardSpec, RewardParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    members: Vec<RewardParams>,
    rates: Vec<f64>,
}

impl Ensemble {
    /// Build an ensemble from explicit members and learning rates. Members
    /// are taken as given; use [`Ensemble::projected`] to enforce admissibility.
    pub fn new(members: Vec<RewardParams>, rates: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(DceeError::Config("ensemble needs at least one member".into()));
        }
        if members.len() != rates.len() {
            return Err(DceeError::Config(format!(
                "{} members but {} learning rates",
                members.len(),
                rates.len()
            )));
        }
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(DceeError::Config("learning rates must be finite and > 0".into()));
        }
        if members.iter().any(|m| !m.is_finite()) {
            return Err(DceeError::InvalidInput("ensemble members must be finite".into()));
        }
        Ok(Ensemble { members, rates })
    }

    pub fn projected(mut self, spec: &QuadraticRewardSpec) -> Self {
        for m in &mut self.members {
            *m = spec.project(m);
        }
        self
    }

    pub fn members(&self) -> &[RewardParams] {
        &self.members
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mean(&self) -> RewardParams {
        let sum: Vector3<f64> = self.members.iter().map(|m| m.0).sum();
        RewardParams(sum / self.members.len() as f64)
    }

    /// One learning step from a measured `(y, R)` pair, followed by projection.
    pub fn measured_update(&self, spec: &QuadraticRewardSpec, y: f64, reward_meas: f64) -> Result<Ensemble> {
        if !reward_meas.is_finite() {
            return Err(DceeError::InvalidInput(format!("measured reward must be finite, got {reward_meas}")));
        }
        let psi = spec.basis(y)?;
        let offset = spec.offset(y);
        let members = self
            .members
            .iter()
            .zip(&self.rates)
            .map(|(m, &eta)| {
                let innovation = psi.dot(&m.0) + offset - reward_meas;
                spec.project(&RewardParams(m.0 - psi * (eta * innovation)))
            })
            .collect();
        Ok(Ensemble { members, rates: self.rates.clone() })
    }

    /// Reward predicted by the ensemble mean.
    pub fn predicted_reward(&self, spec: &QuadraticRewardSpec, y_pred: f64) -> Result<f64> {
        spec.eval_reward(&self.mean(), y_pred)
    }

    /// Candidate-induced members. Not projected.
    pub fn predicted_update(&self, spec: &QuadraticRewardSpec, y_pred: f64) -> Result<Ensemble> {
        let members = GradientPrediction.predict(self, spec, y_pred)?;
        Ok(Ensemble { members, rates: self.rates.clone() })
    }

    pub fn gamma_stats(&self, spec: &QuadraticRewardSpec) -> Result<GammaStats> {
        let gammas = self.members.iter().map(|m| spec.gamma(m)).collect::<Result<Vec<_>>>()?;
        Ok(GammaStats::from_gammas(gammas))
    }
}

/// Ensemble statistics of the optimal operating speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    pub gammas: Vec<f64>,
    pub gamma_mean: f64,
    pub deviations: Vec<f64>,
    /// Sample covariance with 1/N normalization (1×1 for scalar speed).
    pub covariance: f64,
}

impl GammaStats {
    pub fn from_gammas(gammas: Vec<f64>) -> Self {
        let n = gammas.len() as f64;
        let gamma_mean = gammas.iter().sum::<f64>() / n;
        let deviations: Vec<f64> = gammas.iter().map(|g| g - gamma_mean).collect();
        let covariance = deviations.iter().map(|d| d * d).sum::<f64>() / n;
        GammaStats { gammas, gamma_mean, deviations, covariance }
    }

    pub fn trace(&self) -> f64 {
        self.covariance
    }
}

/// Map from a candidate output to predicted ensemble members.
///
/// Implementations must be differentiable in `y` on the region of interest;
/// the controller Jacobian is assembled from [`PredictionMap::predict_with_derivative`].
pub trait PredictionMap {
    fn predict(&self, e: &Ensemble, spec: &QuadraticRewardSpec, y: f64) -> Result<Vec<RewardParams>>;

    /// Predicted members together with `dθ̂ⁱ/dy`.
    fn predict_with_derivative(
        &self,
        e: &Ensemble,
        spec: &QuadraticRewardSpec,
        y: f64,
    ) -> Result<Vec<(RewardParams, Vector3<f64>)>>;
}

/// `θ̂ⁱ = θⁱ − ηᵢ ψ(y) (R(θⁱ, y) − R(θ̄, y))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientPrediction;

impl PredictionMap for GradientPrediction {
    fn predict(&self, e: &Ensemble, spec: &QuadraticRewardSpec, y: f64) -> Result<Vec<RewardParams>> {
        let psi = spec.basis(y)?;
        let mean = e.mean().0;
        Ok(e.members
            .iter()
            .zip(&e.rates)
            .map(|(m, &eta)| {
                // R(θⁱ, y) − R(θ̄, y); the offset cancels.
                let innovation = psi.dot(&(m.0 - mean));
                RewardParams(m.0 - psi * (eta * innovation))
            })
            .collect())
    }

    fn predict_with_derivative(
        &self,
        e: &Ensemble,
        spec: &QuadraticRewardSpec,
        y: f64,
    ) -> Result<Vec<(RewardParams, Vector3<f64>)>> {
        let psi = spec.basis(y)?;
        let dpsi = spec.basis_derivative(y)?;
        let mean = e.mean().0;
        Ok(e.members
            .iter()
            .zip(&e.rates)
            .map(|(m, &eta)| {
                let delta = m.0 - mean;
                let innovation = psi.dot(&delta);
                let d_innovation = dpsi.dot(&delta);
                let theta = RewardParams(m.0 - psi * (eta * innovation));
                let d_theta = -(dpsi * innovation + psi * d_innovation) * eta;
                (theta, d_theta)
            })
            .collect())
    }
}

/// Learning rates log-spaced on `[eta_lo, eta_hi]`.
pub fn log_spaced_rates(n: usize, eta_lo: f64, eta_hi: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(DceeError::Config("ensemble size must be >= 1".into()));
    }
    if !(eta_lo > 0.0 && eta_hi >= eta_lo && eta_hi.is_finite()) {
        return Err(DceeError::Config(format!("invalid learning-rate range [{eta_lo}, {eta_hi}]")));
    }
    if n == 1 {
        return Ok(vec![eta_lo]);
    }
    let ratio = (eta_hi / eta_lo).ln();
    Ok((0..n).map(|i| eta_lo * (ratio * i as f64 / (n - 1) as f64).exp()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleInit {
    pub prior_mean: RewardParams,
    pub spread: [f64; 3],
    pub n: usize,
    pub eta_lo: f64,
    pub eta_hi: f64,
    pub seed: u64,
}

pub fn init_ensemble(spec: &QuadraticRewardSpec, init: &EnsembleInit) -> Result<Ensemble> {
    let rates = log_spaced_rates(init.n, init.eta_lo, init.eta_hi)?;
    if init.spread.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(DceeError::Config("ensemble spread must be finite and >= 0".into()));
    }
    if !init.prior_mean.is_finite() {
        return Err(DceeError::Config("prior mean must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let members = (0..init.n)
        .map(|_| {
            let mut theta = init.prior_mean.0;
            for (t, &s) in theta.iter_mut().zip(&init.spread) {
                if s > 0.0 {
                    *t += rng.random_range(-s..=s);
                }
            }
            spec.project(&RewardParams(theta))
        })
        .collect();
    Ensemble::new(members, rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(v_scale: f64) -> QuadraticRewardSpec {
        QuadraticRewardSpec::new(v_scale, 0.05).unwrap()
    }

    fn p(t: [f64; 3]) -> RewardParams {
        RewardParams::new(t)
    }

    fn init(prior: RewardParams, spread: f64, n: usize) -> EnsembleInit {
        EnsembleInit { prior_mean: prior, spread: [spread; 3], n, eta_lo: 0.05, eta_hi: 0.5, seed: 11 }
    }

    #[test]
    fn init_zero_spread_is_consensus() {
        let s = spec(30.0);
        let prior = s.make_true_params(0.8, 15.0, 0.5).unwrap();
        let e = init_ensemble(&s, &init(prior, 0.0, 6)).unwrap();
        assert!(e.members().iter().all(|m| *m == prior));
        assert_eq!(e.rates().len(), 6);
        assert!((e.rates()[0] - 0.05).abs() < 1e-15 && (e.rates()[5] - 0.5).abs() < 1e-12);
        for w in e.rates().windows(2) {
            assert!((w[1] / w[0] - (10f64).powf(1.0 / 5.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn init_singleton_and_errors() {
        let s = spec(30.0);
        let e = init_ensemble(&s, &init(p([-1.0, 1.0, 0.0]), 0.2, 1)).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e.rates(), &[0.05]);
        assert!(matches!(init_ensemble(&s, &init(p([-1.0, 1.0, 0.0]), 0.2, 0)), Err(DceeError::Config(_))));
        assert!(init_ensemble(&s, &init(p([-1.0, 1.0, 0.0]), -0.2, 3)).is_err());
    }

    #[test]
    fn init_projects_positive_curvature() {
        let s = spec(30.0);
        let e = init_ensemble(&s, &init(p([1.0, 0.3, 0.0]), 0.3, 8)).unwrap();
        assert!(e.members().iter().all(|m| m[0] == -0.05));
    }

    #[test]
    fn init_is_seeded() {
        let s = spec(30.0);
        let a = init_ensemble(&s, &init(p([-1.0, 1.0, 0.0]), 0.3, 5)).unwrap();
        let b = init_ensemble(&s, &init(p([-1.0, 1.0, 0.0]), 0.3, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_examples() {
        let e = Ensemble::new(vec![p([-1.0, 0.0, 0.0]), p([-3.0, 2.0, 0.0])], vec![0.1, 0.1]).unwrap();
        assert_eq!(e.mean(), p([-2.0, 1.0, 0.0]));
        let single = Ensemble::new(vec![p([-1.5, 0.3, 2.0])], vec![0.1]).unwrap();
        assert_eq!(single.mean(), p([-1.5, 0.3, 2.0]));
        let same = Ensemble::new(vec![p([-0.7, 0.1, 0.2]); 4], vec![0.1; 4]).unwrap();
        assert!((same.mean().0 - p([-0.7, 0.1, 0.2]).0).norm() < 1e-15);
    }

    #[test]
    fn ensemble_rejects_bad_construction() {
        assert!(Ensemble::new(vec![], vec![]).is_err());
        assert!(Ensemble::new(vec![p([-1.0, 0.0, 0.0])], vec![0.0]).is_err());
        assert!(Ensemble::new(vec![p([-1.0, 0.0, 0.0])], vec![0.1, 0.2]).is_err());
    }

    #[test]
    fn measured_update_example() {
        let s = spec(30.0);
        let e = Ensemble::new(vec![p([-1.0, 1.0, 0.0])], vec![0.1]).unwrap();
        let next = e.measured_update(&s, 15.0, 0.35).unwrap();
        let expect = p([-0.9975, 1.005, 0.01]);
        assert!((next.members()[0].0 - expect.0).norm() < 1e-14);
        assert_eq!(next.rates(), e.rates());
    }

    #[test]
    fn measured_update_zero_innovation_and_tiny_rate() {
        let s = spec(30.0);
        let m = p([-1.0, 1.2, 0.3]);
        let e = Ensemble::new(vec![m, m], vec![0.1, 0.4]).unwrap();
        let r = s.eval_reward(&m, 21.0).unwrap();
        assert_eq!(e.measured_update(&s, 21.0, r).unwrap(), e);

        let slow = Ensemble::new(vec![m], vec![1e-300]).unwrap();
        assert_eq!(slow.measured_update(&s, 21.0, r + 5.0).unwrap().members()[0], m);
        assert!(e.measured_update(&s, 21.0, f64::NAN).is_err());
    }

    #[test]
    fn measured_update_projects() {
        let s = spec(1.0);
        let e = Ensemble::new(vec![p([-0.06, 0.0, 0.0])], vec![1.0]).unwrap();
        // Large positive innovation pushes the curvature coefficient up.
        let next = e.measured_update(&s, 1.0, 10.0).unwrap();
        assert_eq!(next.members()[0][0], -0.05);
    }

    #[test]
    fn predicted_reward_examples() {
        let s1 = spec(1.0);
        let e = Ensemble::new(vec![p([-1.0, 0.0, 0.0]), p([-3.0, 0.0, 0.0])], vec![0.1, 0.1]).unwrap();
        assert_eq!(e.predicted_reward(&s1, 1.0).unwrap(), -2.0);

        let s = spec(30.0);
        let theta = s.make_true_params(1.0, 22.0, 0.4).unwrap();
        let c = Ensemble::new(vec![theta; 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert!((c.predicted_reward(&s, 18.0).unwrap() - s.eval_reward(&theta, 18.0).unwrap()).abs() < 1e-14);
        let peak = c.predicted_reward(&s, s.gamma(&c.mean()).unwrap()).unwrap();
        assert!((peak - 0.4).abs() < 1e-12);
    }

    #[test]
    fn predicted_update_examples() {
        let s1 = spec(1.0);
        let e = Ensemble::new(vec![p([-1.0, 1.0, 0.0]), p([-1.0, 3.0, 0.0])], vec![0.1, 0.1]).unwrap();
        let pred = e.predicted_update(&s1, 0.5).unwrap();
        assert!((pred.members()[0].0 - p([-0.9875, 1.025, 0.05]).0).norm() < 1e-14);

        let s = spec(30.0);
        let theta = s.make_true_params(1.0, 22.0, 0.4).unwrap();
        let c = Ensemble::new(vec![theta; 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(c.predicted_update(&s, 25.0).unwrap(), c);
        let single = Ensemble::new(vec![p([-1.0, 0.5, 0.2])], vec![0.3]).unwrap();
        assert_eq!(single.predicted_update(&s, 25.0).unwrap(), single);
    }

    #[test]
    fn predicted_update_does_not_project() {
        let s1 = spec(1.0);
        let e = Ensemble::new(vec![p([-0.06, 0.0, 0.0]), p([-0.06, 4.0, 0.0])], vec![1.0, 1.0]).unwrap();
        let pred = e.predicted_update(&s1, 1.0).unwrap();
        assert!(pred.members()[0][0] > -0.05);
        assert!(matches!(pred.gamma_stats(&s1), Err(DceeError::CurvatureViolation { .. })));
    }

    #[test]
    fn gamma_stats_examples() {
        let s = spec(30.0);
        let g10 = s.make_true_params(1.0, 10.0, 0.0).unwrap();
        let g20 = s.make_true_params(1.0, 20.0, 0.0).unwrap();
        let e = Ensemble::new(vec![g10, g20], vec![0.1, 0.1]).unwrap();
        let st = e.gamma_stats(&s).unwrap();
        assert!((st.gamma_mean - 15.0).abs() < 1e-12);
        assert!((st.deviations[0] + 5.0).abs() < 1e-12 && (st.deviations[1] - 5.0).abs() < 1e-12);
        assert!((st.covariance - 25.0).abs() < 1e-10);

        let c = Ensemble::new(vec![g10; 4], vec![0.1; 4]).unwrap();
        let st = c.gamma_stats(&s).unwrap();
        assert!(st.deviations.iter().all(|&d| d == 0.0) && st.covariance == 0.0);

        let one = Ensemble::new(vec![g20], vec![0.1]).unwrap();
        assert_eq!(one.gamma_stats(&s).unwrap().covariance, 0.0);

        let bad = Ensemble::new(vec![p([0.1, 0.0, 0.0])], vec![0.1]).unwrap();
        assert!(matches!(bad.gamma_stats(&s), Err(DceeError::CurvatureViolation { .. })));
    }

    #[test]
    fn prediction_derivative_matches_fd() {
        let s = spec(30.0);
        let e = init_ensemble(&s, &init(s.make_true_params(0.8, 15.0, 0.5).unwrap(), 0.3, 7)).unwrap();
        let y = 19.0;
        let h = 1e-6 * (1.0 + y);
        let with_d = GradientPrediction.predict_with_derivative(&e, &s, y).unwrap();
        let plus = GradientPrediction.predict(&e, &s, y + h).unwrap();
        let minus = GradientPrediction.predict(&e, &s, y - h).unwrap();
        for (i, (theta, d)) in with_d.iter().enumerate() {
            assert_eq!(*theta, e.predicted_update(&s, y).unwrap().members()[i]);
            let fd = (plus[i].0 - minus[i].0) / (2.0 * h);
            assert!((fd - d).norm() <= 1e-7 * d.norm().max(1e-12), "member {i}: {fd} vs {d}");
        }
    }

    #[test]
    fn learning_contracts_on_speed_sweep() {
        let s = spec(30.0);
        let truth = s.make_true_params(1.0, 25.0, 1.0).unwrap();
        let mut e = init_ensemble(&s, &init(s.make_true_params(0.8, 15.0, 0.5).unwrap(), 0.3, 10)).unwrap();
        let dist = |e: &Ensemble| (e.mean().0 - truth.0).norm();
        let mut checkpoints = vec![dist(&e)];
        for k in 0..500 {
            let y = 20.0 + 10.0 * (0.37 * k as f64).sin();
            let r = s.eval_reward(&truth, y).unwrap();
            e = e.measured_update(&s, y, r).unwrap();
            if (k + 1) % 100 == 0 {
                checkpoints.push(dist(&e));
            }
        }
        for w in checkpoints.windows(2) {
            assert!(w[1] < w[0], "distance trend not decreasing: {checkpoints:?}");
        }
    }

    fn arb_ensemble() -> impl Strategy<Value = Ensemble> {
        (1usize..12, any::<u64>()).prop_map(|(n, seed)| {
            let s = spec(30.0);
            let prior = s.make_true_params(1.0, 22.0, 0.5).unwrap();
            init_ensemble(&s, &EnsembleInit { prior_mean: prior, spread: [0.3; 3], n, eta_lo: 0.05, eta_hi: 0.5, seed })
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn consensus_is_fixed_point(w in 0.2f64..3.0, v in 5.0f64..40.0, n in 1usize..10, y in 0.0f64..45.0) {
            let s = spec(30.0);
            let theta = s.make_true_params(w, v, 0.3).unwrap();
            let e = Ensemble::new(vec![theta; n], log_spaced_rates(n, 0.05, 0.5).unwrap()).unwrap();
            let pred = e.predicted_update(&s, y).unwrap();
            for m in pred.members() {
                prop_assert!((m.0 - theta.0).norm() <= 1e-14);
            }
            prop_assert!(pred.gamma_stats(&s).unwrap().covariance <= 1e-20);
        }

        #[test]
        fn deviations_centered_and_trace_identity(e in arb_ensemble()) {
            let s = spec(30.0);
            let st = e.gamma_stats(&s).unwrap();
            prop_assert!(st.deviations.iter().sum::<f64>().abs() <= 1e-12);
            let n = st.deviations.len() as f64;
            let alt = st.deviations.iter().map(|d| d.powi(2)).sum::<f64>() / n;
            prop_assert!((st.trace() - alt).abs() <= 1e-12);
            prop_assert!(st.covariance >= 0.0);
        }
    }
}
