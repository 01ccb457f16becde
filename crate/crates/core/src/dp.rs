//! Gaussian mechanism on client activations.
//!
//! Noise scale: `σ = sqrt(2 ln(1.25/δ)) · Δf / ε`. The standard-normal draw
//! `r` behind each perturbation is kept in a [`NoiseRecord`] so that the
//! derivative of the released activation with respect to ε,
//! `∂h/∂ε = -r · sqrt(2 ln(1.25/δ)) · Δf / ε²`, can be evaluated for the
//! same release during ε adaptation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::standard_normal;

/// Per-client `(ε, δ, Δf)` with the ε interval and adaptation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    epsilon_min: f64,
    epsilon_max: f64,
    delta: f64,
    sensitivity: f64,
    step_size: f64,
}

impl PrivacyBudget {
    pub fn new(
        epsilon: f64,
        (epsilon_min, epsilon_max): (f64, f64),
        delta: f64,
        sensitivity: f64,
        step_size: f64,
    ) -> Result<Self> {
        let finite = [epsilon, epsilon_min, epsilon_max, delta, sensitivity, step_size]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBudget("all parameters must be finite".into()));
        }
        if !(epsilon_min > 0.0 && epsilon_min <= epsilon_max) {
            return Err(Error::InvalidBudget(format!(
                "epsilon bounds [{epsilon_min}, {epsilon_max}] must satisfy 0 < lower <= upper"
            )));
        }
        if !(epsilon_min..=epsilon_max).contains(&epsilon) {
            return Err(Error::InvalidBudget(format!(
                "epsilon {epsilon} outside [{epsilon_min}, {epsilon_max}]"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidBudget(format!("delta {delta} must lie in (0, 1)")));
        }
        if sensitivity <= 0.0 {
            return Err(Error::InvalidBudget(format!("sensitivity {sensitivity} must be > 0")));
        }
        if step_size < 0.0 {
            return Err(Error::InvalidBudget(format!("step size {step_size} must be >= 0")));
        }
        Ok(Self {
            epsilon,
            epsilon_min,
            epsilon_max,
            delta,
            sensitivity,
            step_size,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.epsilon_min, self.epsilon_max)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    /// Set ε, clamped into the interval. Returns true when clamping occurred.
    pub fn set_epsilon(&mut self, epsilon: f64) -> bool {
        if epsilon.is_nan() {
            return true;
        }
        let clamped = epsilon.clamp(self.epsilon_min, self.epsilon_max);
        self.epsilon = clamped;
        clamped != epsilon
    }

    /// Same budget at a different ε (clamped).
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let mut b = self.clone();
        b.set_epsilon(epsilon);
        b
    }

    /// Copy with ε bounds widened so that `epsilon` is admissible as is.
    /// Used by finite-difference probes that step slightly past a bound.
    pub fn unclamped_at(&self, epsilon: f64) -> Self {
        let mut b = self.clone();
        b.epsilon_min = b.epsilon_min.min(epsilon);
        b.epsilon_max = b.epsilon_max.max(epsilon);
        b.epsilon = epsilon;
        b
    }
}

/// `sqrt(2 ln(1.25/δ)) · Δf / ε`
pub fn gaussian_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    let log_term = (1.25 / delta).ln();
    if !(delta > 0.0) || !(log_term > 0.0) {
        return Err(Error::InvalidBudget(format!(
            "delta {delta} gives a non-positive ln(1.25/delta)"
        )));
    }
    if !(epsilon > 0.0) || !(sensitivity > 0.0) {
        return Err(Error::InvalidBudget(format!(
            "epsilon {epsilon} and sensitivity {sensitivity} must be positive"
        )));
    }
    Ok((2.0 * log_term).sqrt() * sensitivity / epsilon)
}

pub fn calibrate_sigma(budget: &PrivacyBudget) -> Result<f64> {
    gaussian_sigma(budget.epsilon, budget.delta, budget.sensitivity)
}

/// The standard-normal draw and σ used for one release.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub client: usize,
    pub draw: Matrix,
    pub sigma: f64,
}

impl NoiseRecord {
    /// `σ · r`, the noise actually added.
    pub fn noise(&self) -> Matrix {
        self.draw.scale(self.sigma)
    }
}

/// `activation + σ r` with `r ~ N(0, 1)` i.i.d. from `rng`.
pub fn perturb<R: Rng + ?Sized>(
    client: usize,
    activation: &Matrix,
    budget: &PrivacyBudget,
    rng: &mut R,
) -> Result<(Matrix, NoiseRecord)> {
    activation.ensure_finite("perturb input")?;
    let draw = Matrix::from_fn(activation.rows(), activation.cols(), |_, _| standard_normal(rng));
    perturb_with_draw(client, activation, budget, draw)
}

/// Perturbation with a caller-supplied draw `r`.
pub fn perturb_with_draw(
    client: usize,
    activation: &Matrix,
    budget: &PrivacyBudget,
    draw: Matrix,
) -> Result<(Matrix, NoiseRecord)> {
    let sigma = calibrate_sigma(budget)?;
    let noisy = activation.zip_map(&draw, |h, r| h + sigma * r)?;
    Ok((noisy, NoiseRecord { client, draw, sigma }))
}

/// `∂h/∂ε = -r · sqrt(2 ln(1.25/δ)) · Δf / ε²`, elementwise.
pub fn noise_grad_epsilon(record: &NoiseRecord, budget: &PrivacyBudget) -> Result<Matrix> {
    let eps = budget.epsilon;
    let coeff = gaussian_sigma(eps, budget.delta, budget.sensitivity)? / eps;
    Ok(record.draw.map(|r| -r * coeff))
}

/// Signal-to-noise ratio in decibels: `10 log10(‖clean‖² / ‖noise‖²)`.
pub fn snr_db(clean: &Matrix, noise: &Matrix) -> Result<f64> {
    clean.same_shape(noise, "snr_db")?;
    snr_db_from_energy(clean.sum_squares(), noise.sum_squares())
}

pub fn snr_db_from_energy(signal: f64, noise: f64) -> Result<f64> {
    if noise == 0.0 {
        return Err(Error::ZeroNoise);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Records of the current round, keyed by client id.
#[derive(Debug, Default, Clone)]
pub struct NoiseStore {
    records: BTreeMap<usize, NoiseRecord>,
}

impl NoiseStore {
    pub fn insert(&mut self, record: NoiseRecord) {
        self.records.insert(record.client, record);
    }

    pub fn get(&self, client: usize) -> Result<&NoiseRecord> {
        self.records.get(&client).ok_or(Error::MissingNoiseRecord(client))
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    fn budget(eps: f64, delta: f64, df: f64) -> PrivacyBudget {
        PrivacyBudget::new(eps, (eps.min(0.5), eps.max(5.0)), delta, df, 0.0).unwrap()
    }

    #[test]
    fn sigma_reference_values() {
        // sqrt(2 ln 125) = 3.1075114600...
        let s = calibrate_sigma(&budget(1.0, 0.01, 1.0)).unwrap();
        assert!((s - 3.107_52).abs() < 1e-4, "{s}");
        assert!((s - (2.0 * 125f64.ln()).sqrt()).abs() < 1e-12);
        let s = calibrate_sigma(&budget(5.0, 0.01, 0.01)).unwrap();
        assert!((s - 0.006_215_023).abs() < 1e-8, "{s}");
    }

    #[test]
    fn doubling_epsilon_halves_sigma() {
        for &(df, delta) in &[(0.1, 0.01), (1.0, 1e-5), (0.37, 0.2)] {
            let a = calibrate_sigma(&budget(1.0, delta, df)).unwrap();
            let b = calibrate_sigma(&budget(2.0, delta, df)).unwrap();
            assert!((a / b - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_budgets() {
        assert!(gaussian_sigma(1.0, 1.25, 1.0).is_err());
        assert!(gaussian_sigma(1.0, 2.0, 1.0).is_err());
        assert!(PrivacyBudget::new(1.0, (0.5, 5.0), 1.0, 0.1, 0.0).is_err());
        assert!(PrivacyBudget::new(0.3, (0.5, 5.0), 0.01, 0.1, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, (0.5, 5.0), 0.01, 0.0, 0.0).is_err());
    }

    #[test]
    fn set_epsilon_clamps() {
        let mut b = budget(1.0, 0.01, 0.1);
        assert!(b.set_epsilon(0.1));
        assert_eq!(b.epsilon(), 0.5);
        assert!(b.set_epsilon(9.0));
        assert_eq!(b.epsilon(), 5.0);
        assert!(!b.set_epsilon(2.0));
    }

    #[test]
    fn negligible_noise_at_huge_epsilon() {
        let b = PrivacyBudget::new(1e6, (0.5, 1e6), 0.01, 0.1, 0.0).unwrap();
        let h = Matrix::from_fn(64, 16, |r, c| ((r * 16 + c) as f64 * 0.37).sin());
        let mut rng = rng_stream(1, "noise", 0, 0);
        let (noisy, _) = perturb(0, &h, &b, &mut rng).unwrap();
        assert!(noisy.max_abs_diff(&h) < 1e-4);
    }

    #[test]
    fn all_ones_draw_adds_sigma() {
        let b = budget(2.0, 0.01, 0.3);
        let h = Matrix::from_fn(3, 4, |r, c| r as f64 - c as f64);
        let (noisy, rec) = perturb_with_draw(0, &h, &b, Matrix::filled(3, 4, 1.0)).unwrap();
        let sigma = calibrate_sigma(&b).unwrap();
        assert_eq!(rec.sigma, sigma);
        for (n, x) in noisy.data().iter().zip(h.data()) {
            assert!((n - x - sigma).abs() < 1e-15);
        }
    }

    #[test]
    fn empirical_noise_std_matches_sigma() {
        let b = budget(1.0, 0.01, 0.1);
        let sigma = calibrate_sigma(&b).unwrap();
        let h = Matrix::zeros(1000, 1000);
        let mut rng = rng_stream(99, "noise", 0, 0);
        let (noisy, _) = perturb(0, &h, &b, &mut rng).unwrap();
        let n = noisy.data().len() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let var = noisy.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.01);
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.02);
    }

    #[test]
    fn epsilon_gradient_matches_frozen_draw_differences() {
        let mut rng = rng_stream(5, "noise", 0, 0);
        let h = Matrix::from_fn(4, 3, |r, c| (r + c) as f64 * 0.1);
        let draw = Matrix::from_fn(4, 3, |_, _| standard_normal(&mut rng));
        for &eps in &[0.5, 1.0, 2.0, 5.0] {
            let b = budget(eps, 0.01, 0.1);
            let (_, rec) = perturb_with_draw(0, &h, &b, draw.clone()).unwrap();
            let analytic = noise_grad_epsilon(&rec, &b).unwrap();
            let step = 1e-5 * eps;
            let (plus, _) = perturb_with_draw(0, &h, &b.unclamped_at(eps + step), draw.clone()).unwrap();
            let (minus, _) = perturb_with_draw(0, &h, &b.unclamped_at(eps - step), draw.clone()).unwrap();
            for k in 0..analytic.data().len() {
                let fd = (plus.data()[k] - minus.data()[k]) / (2.0 * step);
                let a = analytic.data()[k];
                assert!((fd - a).abs() <= 1e-6 * a.abs().max(1e-12), "eps {eps}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn zero_draw_zero_gradient_and_sign() {
        let b = budget(1.0, 0.01, 0.1);
        let (_, rec) = perturb_with_draw(0, &Matrix::zeros(2, 2), &b, Matrix::zeros(2, 2)).unwrap();
        assert!(noise_grad_epsilon(&rec, &b).unwrap().data().iter().all(|&g| g == 0.0));
        let (_, rec) = perturb_with_draw(
            0,
            &Matrix::zeros(1, 2),
            &b,
            Matrix::from_vec(1, 2, vec![0.7, -0.2]).unwrap(),
        )
        .unwrap();
        let g = noise_grad_epsilon(&rec, &b).unwrap();
        assert!(g.get(0, 0) < 0.0 && g.get(0, 1) > 0.0);
    }

    #[test]
    fn snr_laws() {
        let clean = Matrix::from_fn(5, 5, |r, c| (r * 5 + c) as f64 - 12.0);
        let noise = clean.map(|v| -v);
        assert!(snr_db(&clean, &noise).unwrap().abs() < 1e-12);
        let base = snr_db(&clean, &noise.scale(0.3)).unwrap();
        let louder = snr_db(&clean.scale(10.0), &noise.scale(0.3)).unwrap();
        assert!((louder - base - 20.0).abs() < 1e-9);
        assert!(matches!(snr_db(&clean, &Matrix::zeros(5, 5)), Err(Error::ZeroNoise)));
    }

    #[test]
    fn store_reports_missing_record() {
        let store = NoiseStore::default();
        assert!(matches!(store.get(3), Err(Error::MissingNoiseRecord(3))));
    }
}
