//! A data-holding participant.
//!
//! A client owns its bottom model and privacy budget and only ever sees its
//! own feature columns and the gradient slice addressed to it. Nothing in
//! this type can reach another client's state.

use crate::dp::{perturb, NoiseRecord, PrivacyBudget};
use crate::error::Result;
use crate::incentive::ClientEconomics;
use crate::matrix::Matrix;
use crate::messages::ActivationBatch;
use crate::nn::{ForwardTape, Mlp};
use crate::rng::rng_stream;

#[derive(Debug, Clone)]
pub struct Client {
    id: usize,
    model: Mlp,
    budget: PrivacyBudget,
    econ: ClientEconomics,
    signal_energy: f64,
    noise_energy: f64,
}

/// What a client transmits for one batch, plus what it keeps locally.
#[derive(Debug)]
pub struct Release {
    pub activation: ActivationBatch,
    /// Kept by the client; needed for its backward pass.
    pub tape: Option<ForwardTape>,
    pub noise: Option<NoiseRecord>,
    /// `‖h‖²` of the clean activation.
    pub signal_energy: f64,
}

impl Client {
    /// Bottom model initialized from the `init_key` stream. Twin clients
    /// pass their original's key to get identical weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        init_key: usize,
        input: usize,
        hidden: &[usize],
        embedding: usize,
        seed: u64,
        budget: PrivacyBudget,
        econ: ClientEconomics,
    ) -> Result<Self> {
        let mut rng = rng_stream(seed, "client-init", init_key as u64, 0);
        Ok(Self {
            id,
            model: Mlp::fcnn(input, hidden, embedding, &mut rng)?,
            budget,
            econ,
            signal_energy: 0.0,
            noise_energy: 0.0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn budget(&self) -> &PrivacyBudget {
        &self.budget
    }

    pub fn budget_mut(&mut self) -> &mut PrivacyBudget {
        &mut self.budget
    }

    pub fn economics(&self) -> &ClientEconomics {
        &self.econ
    }

    pub fn embedding_dim(&self) -> usize {
        self.model.output_dim()
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    /// Clean embedding, as used at test time.
    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        self.model.predict(features)
    }

    /// Forward pass and optional perturbation drawn from the
    /// `(namespace, id, round)` stream. With `keep_tape` the forward tape is
    /// retained for a later backward pass.
    pub fn release(
        &self,
        features: &Matrix,
        noisy: bool,
        seed: u64,
        namespace: &str,
        round: usize,
        keep_tape: bool,
    ) -> Result<Release> {
        let (h, tape) = if keep_tape {
            let (h, tape) = self.model.forward(features)?;
            (h, Some(tape))
        } else {
            (self.model.predict(features)?, None)
        };
        let signal_energy = h.sum_squares();
        if !noisy {
            return Ok(Release {
                activation: ActivationBatch {
                    client: self.id,
                    values: h,
                    noisy: false,
                },
                tape,
                noise: None,
                signal_energy,
            });
        }
        let mut rng = rng_stream(seed, namespace, self.id as u64, round as u64);
        let (values, record) = perturb(self.id, &h, &self.budget, &mut rng)?;
        Ok(Release {
            activation: ActivationBatch {
                client: self.id,
                values,
                noisy: true,
            },
            tape,
            noise: Some(record),
            signal_energy,
        })
    }

    /// Backpropagate the server's gradient slice and take an SGD step.
    pub fn apply_gradient(&mut self, tape: ForwardTape, gradient: &Matrix, lr: f64) -> Result<()> {
        let (grads, _) = self.model.backward(tape, gradient)?;
        self.model.sgd_step(&grads, lr)
    }

    /// Add one training release to the SNR tally.
    pub fn record_snr(&mut self, signal_energy: f64, noise_energy: f64) {
        self.signal_energy += signal_energy;
        self.noise_energy += noise_energy;
    }

    /// Accumulated signal and noise energy over training releases.
    pub fn snr_energy(&self) -> (f64, f64) {
        (self.signal_energy, self.noise_energy)
    }
}
