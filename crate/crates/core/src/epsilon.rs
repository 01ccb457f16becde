//! Per-client adaptation of ε by gradient ascent on the reward.
//!
//! ```text
//! G   = α ⟨∂S/∂h, ∂h/∂ε⟩ + β ∂P/∂ε
//! ε' = clamp(ε + η G, ε_L, ε_U)
//! ```
//!
//! Only `loss_N` depends on `h_i` (the leave-one-out head for `i` never reads
//! it), so `∂S/∂h_i = C^{1/a} · (−100 · loss_{N−i} / loss_N²) · ∂loss_N/∂h_i`.
//! With `loss_N` a batch mean, `∂loss_N/∂h_i` already carries the `1/m`
//! factor and the plain Frobenius product gives `dR/dε` for the unfloored
//! importance.

use serde::{Deserialize, Serialize};

use crate::contribution::HeadBank;
use crate::dp::PrivacyBudget;
use crate::error::{Error, Result};
use crate::incentive::ClientEconomics;
use crate::matrix::Matrix;
use crate::messages::ActivationBatch;

/// `∂S/∂h_i` from the round's losses and the global head's input gradient.
pub fn gs_h_from_parts(
    loss_all: f64,
    loss_without: f64,
    grad_loss_all: &Matrix,
    econ: &ClientEconomics,
) -> Result<Matrix> {
    if !(loss_all > 0.0) || !loss_all.is_finite() {
        return Err(Error::DegenerateLoss(loss_all));
    }
    let k = econ.resource_weight() * (-100.0 * loss_without / (loss_all * loss_all));
    Ok(grad_loss_all.scale(k))
}

/// `∂S/∂h_i` for `client` on this batch.
pub fn compute_gs_h(
    bank: &HeadBank,
    acts: &[ActivationBatch],
    labels: &[usize],
    client: usize,
    econ: &ClientEconomics,
) -> Result<Matrix> {
    let slot = bank
        .clients()
        .iter()
        .position(|&c| c == client)
        .ok_or(Error::InactiveClient(client))?;
    let loss_without = bank.loo_loss(client, acts, labels)?;
    let (loss_all, grads) = bank.global_loss_with_input_grads(acts, labels)?;
    gs_h_from_parts(loss_all, loss_without, &grads[slot], econ)
}

/// `α ⟨gs_h, dh_deps⟩_F − β Δf / ε²`
pub fn grad_contribution(
    gs_h: &Matrix,
    dh_deps: &Matrix,
    econ: &ClientEconomics,
    budget: &PrivacyBudget,
) -> Result<f64> {
    let inner = gs_h.frobenius_dot(dh_deps)?;
    let eps = budget.epsilon();
    let g = econ.alpha * inner - econ.beta * budget.sensitivity() / (eps * eps);
    if !g.is_finite() {
        return Err(Error::NonFinite("grad_contribution"));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonStep {
    pub round: usize,
    /// ε before the update.
    pub before: f64,
    pub g: f64,
    /// ε after the update.
    pub after: f64,
    pub clamped: bool,
}

/// `ε ← clamp(ε + η G)`, returning the trace entry.
pub fn update_epsilon(budget: &mut PrivacyBudget, g: f64, round: usize) -> EpsilonStep {
    let before = budget.epsilon();
    let clamped = budget.set_epsilon(before + budget.step_size() * g);
    EpsilonStep {
        round,
        before,
        g,
        after: budget.epsilon(),
        clamped,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpsilonTrace {
    pub client: usize,
    pub steps: Vec<EpsilonStep>,
}

impl EpsilonTrace {
    pub fn new(client: usize) -> Self {
        Self {
            client,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, step: EpsilonStep) {
        self.steps.push(step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contribution::importance_from_losses;
    use crate::dp::{noise_grad_epsilon, perturb_with_draw};
    use crate::rng::{rng_stream, standard_normal};

    fn budget(eps: f64, step: f64) -> PrivacyBudget {
        PrivacyBudget::new(eps, (0.5, 5.0), 0.01, 0.1, step).unwrap()
    }

    #[test]
    fn zero_contribution_gradient_pushes_epsilon_down() {
        let econ = ClientEconomics {
            beta: 10.0,
            ..Default::default()
        };
        let b = budget(2.0, 0.05);
        let z = Matrix::zeros(3, 2);
        let g = grad_contribution(&z, &Matrix::filled(3, 2, 1.0), &econ, &b).unwrap();
        assert!((g + 10.0 * 0.1 / 4.0).abs() < 1e-15);

        let econ0 = ClientEconomics { beta: 0.0, ..econ };
        assert_eq!(
            grad_contribution(&Matrix::filled(3, 2, 1.0), &z, &econ0, &b).unwrap(),
            0.0
        );
        assert!(grad_contribution(&z, &Matrix::zeros(2, 2), &econ0, &b).is_err());
    }

    #[test]
    fn update_examples() {
        let mut b = budget(1.0, 1.0);
        let s = update_epsilon(&mut b, 0.2, 1);
        assert!((s.after - 1.2).abs() < 1e-12 && !s.clamped);

        let mut b = budget(0.55, 1.0);
        let s = update_epsilon(&mut b, -0.3, 1);
        assert_eq!(s.after, 0.5);
        assert!(s.clamped);

        let mut b = budget(1.3, 0.0);
        for g in [5.0, -5.0, 1e9] {
            update_epsilon(&mut b, g, 1);
        }
        assert_eq!(b.epsilon(), 1.3);
    }

    #[test]
    fn bounds_are_fixed_points() {
        let mut b = budget(0.5, 1.0);
        assert_eq!(update_epsilon(&mut b, -1.0, 1).after, 0.5);
        let mut b = budget(5.0, 1.0);
        assert_eq!(update_epsilon(&mut b, 2.0, 1).after, 5.0);
    }

    fn frozen_round() -> (HeadBank, Vec<ActivationBatch>, Vec<usize>, Matrix) {
        let bank = HeadBank::new(&[0, 1, 2], &[3, 2, 2], &[6], 4, 11, 0).unwrap();
        let mut rng = rng_stream(5, "eps-test", 0, 0);
        let acts: Vec<ActivationBatch> = [3, 2, 2]
            .iter()
            .enumerate()
            .map(|(c, &d)| ActivationBatch {
                client: c,
                values: Matrix::from_fn(9, d, |_, _| standard_normal(&mut rng)),
                noisy: true,
            })
            .collect();
        let draw = Matrix::from_fn(9, 3, |_, _| standard_normal(&mut rng));
        let labels = (0..9).map(|i| i % 4).collect();
        (bank, acts, labels, draw)
    }

    #[test]
    fn gs_h_matches_finite_difference_of_s() {
        let (bank, acts, labels, _) = frozen_round();
        let econ = ClientEconomics {
            resource_fraction: 0.5,
            ..Default::default()
        };
        let gs = compute_gs_h(&bank, &acts, &labels, 0, &econ).unwrap();
        let s_at = |a: &[ActivationBatch]| {
            let la = bank.global_loss(a, &labels).unwrap();
            let lw = bank.loo_loss(0, a, &labels).unwrap();
            importance_from_losses(la, lw).unwrap() * econ.resource_weight()
        };
        let h = 1e-5;
        for (r, c) in [(0, 0), (4, 2), (8, 1)] {
            let mut up = acts.clone();
            let mut dn = acts.clone();
            up[0].values.set(r, c, acts[0].values.get(r, c) + h);
            dn[0].values.set(r, c, acts[0].values.get(r, c) - h);
            let fd = (s_at(&up) - s_at(&dn)) / (2.0 * h);
            let an = gs.get(r, c);
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-6), "{fd} vs {an}");
        }
    }

    #[test]
    fn composed_gradient_matches_finite_difference_of_reward() {
        let (bank, acts, labels, draw) = frozen_round();
        let econ = ClientEconomics::default();
        let clean = acts[0].values.clone();
        let reward_at = |eps: f64| {
            let b = budget(1.0, 0.05).unclamped_at(eps);
            let (noisy, _) = perturb_with_draw(0, &clean, &b, draw.clone()).unwrap();
            let mut a = acts.clone();
            a[0].values = noisy;
            let la = bank.global_loss(&a, &labels).unwrap();
            let lw = bank.loo_loss(0, &a, &labels).unwrap();
            let s = importance_from_losses(la, lw).unwrap() * econ.resource_weight();
            econ.alpha * s + econ.beta * b.sensitivity() / eps
        };
        for eps in [0.5, 1.0, 2.0, 5.0] {
            let b = budget(1.0, 0.05).unclamped_at(eps);
            let (noisy, record) = perturb_with_draw(0, &clean, &b, draw.clone()).unwrap();
            let mut a = acts.clone();
            a[0].values = noisy;
            let gs = compute_gs_h(&bank, &a, &labels, 0, &econ).unwrap();
            let dh = noise_grad_epsilon(&record, &b).unwrap();
            let g = grad_contribution(&gs, &dh, &econ, &b).unwrap();
            let step = 1e-6 * eps;
            let fd = (reward_at(eps + step) - reward_at(eps - step)) / (2.0 * step);
            assert!((g - fd).abs() <= 1e-3 * g.abs(), "eps {eps}: {g} vs {fd}");
        }
    }
}
