//! Leave-one-out contribution scoring.
//!
//! The server keeps one global head over all active clients' activations and
//! one extra head per client that never sees that client's columns. Client
//! `i`'s importance for a round is
//!
//! ```text
//! I_i = (loss_{N-i} - loss_N) · 100 / loss_N
//! ```
//!
//! where `loss_N` is the global head's cross-entropy and `loss_{N-i}` the
//! cross-entropy of the head that excludes client `i`. Every head consumes
//! the same (possibly noisy) activations. Only the global head's input
//! gradient is ever returned to clients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::messages::ActivationBatch;
use crate::nn::{softmax_cross_entropy, Mlp};
use crate::rng::{rng_stream, SERVER};

#[derive(Debug, Clone)]
pub struct HeadBank {
    clients: Vec<usize>,
    dims: Vec<usize>,
    hidden: Vec<usize>,
    classes: usize,
    seed: u64,
    generation: u64,
    global: Mlp,
    loo: Vec<Mlp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientContribution {
    pub client: usize,
    /// `I_i` in percent; may be negative.
    pub importance: f64,
    /// `loss_{N-i}`
    pub loss_without: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub round: usize,
    /// `loss_N`
    pub loss_all: f64,
    pub clients: Vec<ClientContribution>,
}

impl ContributionReport {
    pub fn get(&self, client: usize) -> Option<&ClientContribution> {
        self.clients.iter().find(|c| c.client == client)
    }
}

/// `(loss_without - loss_all) · 100 / loss_all`
pub fn importance_from_losses(loss_all: f64, loss_without: f64) -> Result<f64> {
    if !(loss_all > 0.0) || !loss_all.is_finite() {
        return Err(Error::DegenerateLoss(loss_all));
    }
    Ok((loss_without - loss_all) * 100.0 / loss_all)
}

/// Outcome of one server training step.
#[derive(Debug, Clone)]
pub struct HeadStep {
    /// Global-head loss on the training batch, before the update.
    pub loss_all: f64,
    /// `∂loss_N/∂h_i` for every active client, in client order.
    pub input_grads: Vec<Matrix>,
}

impl HeadBank {
    /// Fresh heads for `clients` with embedding widths `dims`.
    ///
    /// Initialization draws from streams keyed by `generation`, so a rebuild
    /// after dropout gets new, reproducible weights.
    pub fn new(
        clients: &[usize],
        dims: &[usize],
        hidden: &[usize],
        classes: usize,
        seed: u64,
        generation: u64,
    ) -> Result<Self> {
        if clients.len() != dims.len() {
            return Err(Error::shape("HeadBank clients/dims", clients.len(), dims.len()));
        }
        if clients.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a head bank needs at least 2 clients, got {}",
                clients.len()
            )));
        }
        if clients.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("client ids must be strictly increasing".into()));
        }
        let total: usize = dims.iter().sum();
        let mut rng = rng_stream(seed, "head-init-global", SERVER, generation);
        let global = Mlp::fcnn(total, hidden, classes, &mut rng)?;
        let loo = clients
            .iter()
            .zip(dims)
            .map(|(&c, &d)| {
                let mut rng = rng_stream(seed, "head-init-loo", c as u64, generation);
                Mlp::fcnn(total - d, hidden, classes, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clients: clients.to_vec(),
            dims: dims.to_vec(),
            hidden: hidden.to_vec(),
            classes,
            seed,
            generation,
            global,
            loo,
        })
    }

    pub fn clients(&self) -> &[usize] {
        &self.clients
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn global_head(&self) -> &Mlp {
        &self.global
    }

    pub fn global_head_mut(&mut self) -> &mut Mlp {
        &mut self.global
    }

    pub fn loo_head(&self, client: usize) -> Result<&Mlp> {
        Ok(&self.loo[self.slot(client)?])
    }

    pub fn loo_head_mut(&mut self, client: usize) -> Result<&mut Mlp> {
        let k = self.slot(client)?;
        Ok(&mut self.loo[k])
    }

    fn slot(&self, client: usize) -> Result<usize> {
        self.clients
            .iter()
            .position(|&c| c == client)
            .ok_or(Error::InactiveClient(client))
    }

    /// Rebuild for the remaining clients after `dropped` leave; all heads are
    /// re-initialized under the next generation.
    pub fn without(&self, dropped: &[usize]) -> Result<Self> {
        let (clients, dims): (Vec<usize>, Vec<usize>) = self
            .clients
            .iter()
            .zip(&self.dims)
            .filter(|(c, _)| !dropped.contains(c))
            .map(|(&c, &d)| (c, d))
            .unzip();
        Self::new(
            &clients,
            &dims,
            &self.hidden,
            self.classes,
            self.seed,
            self.generation + 1,
        )
    }

    fn check_activations(&self, acts: &[ActivationBatch], labels: &[usize]) -> Result<()> {
        if acts.len() != self.clients.len() {
            return Err(Error::shape(
                "activations vs active clients",
                self.clients.len(),
                acts.len(),
            ));
        }
        for ((a, &c), &d) in acts.iter().zip(&self.clients).zip(&self.dims) {
            if a.client != c {
                return Err(Error::shape("activation client order", c, a.client));
            }
            if a.values.cols() != d {
                return Err(Error::shape("activation width", d, a.values.cols()));
            }
            if a.values.rows() != labels.len() {
                return Err(Error::shape("activation rows vs labels", labels.len(), a.values.rows()));
            }
        }
        Ok(())
    }

    /// Column-wise concatenation in client-id order, optionally skipping one.
    fn concat(&self, acts: &[ActivationBatch], exclude: Option<usize>) -> Result<Matrix> {
        let parts: Vec<&Matrix> = acts
            .iter()
            .filter(|a| Some(a.client) != exclude)
            .map(|a| &a.values)
            .collect();
        Matrix::hconcat(&parts)
    }

    /// `loss_N` on this batch.
    pub fn global_loss(&self, acts: &[ActivationBatch], labels: &[usize]) -> Result<f64> {
        self.check_activations(acts, labels)?;
        let logits = self.global.predict(&self.concat(acts, None)?)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    /// `loss_{N-i}` on this batch.
    pub fn loo_loss(&self, client: usize, acts: &[ActivationBatch], labels: &[usize]) -> Result<f64> {
        let k = self.slot(client)?;
        self.check_activations(acts, labels)?;
        let logits = self.loo[k].predict(&self.concat(acts, Some(client))?)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    /// `loss_N` and its gradient with respect to each client's activation,
    /// without touching any parameters.
    pub fn global_loss_with_input_grads(
        &self,
        acts: &[ActivationBatch],
        labels: &[usize],
    ) -> Result<(f64, Vec<Matrix>)> {
        self.check_activations(acts, labels)?;
        let (logits, tape) = self.global.forward(&self.concat(acts, None)?)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let (_, grad_input) = self.global.backward(tape, &grad_logits)?;
        Ok((loss, self.split_columns(&grad_input)))
    }

    fn split_columns(&self, m: &Matrix) -> Vec<Matrix> {
        let mut start = 0;
        self.dims
            .iter()
            .map(|&d| {
                let block = m.column_block(start..start + d);
                start += d;
                block
            })
            .collect()
    }

    /// One SGD step on the global head and on every leave-one-out head.
    pub fn train_heads(&mut self, acts: &[ActivationBatch], labels: &[usize], lr: f64) -> Result<HeadStep> {
        self.check_activations(acts, labels)?;
        let all = self.concat(acts, None)?;
        let (logits, tape) = self.global.forward(&all)?;
        let (loss_all, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let (grads, grad_input) = self.global.backward(tape, &grad_logits)?;
        self.global.sgd_step(&grads, lr)?;

        let clients = &self.clients;
        let loo_inputs = clients
            .iter()
            .map(|&c| self.concat(acts, Some(c)))
            .collect::<Result<Vec<_>>>()?;
        self.loo
            .par_iter_mut()
            .zip(loo_inputs.par_iter())
            .try_for_each(|(head, input)| -> Result<()> {
                let (logits, tape) = head.forward(input)?;
                let (_, g) = softmax_cross_entropy(&logits, labels)?;
                let (pg, _) = head.backward(tape, &g)?;
                head.sgd_step(&pg, lr)
            })?;

        Ok(HeadStep {
            loss_all,
            input_grads: self.split_columns(&grad_input),
        })
    }

    /// Leave-one-out importance of every active client on this batch.
    pub fn compute_importance(
        &self,
        round: usize,
        acts: &[ActivationBatch],
        labels: &[usize],
    ) -> Result<ContributionReport> {
        let loss_all = self.global_loss(acts, labels)?;
        if !(loss_all > 0.0) {
            return Err(Error::DegenerateLoss(loss_all));
        }
        let clients = self
            .clients
            .par_iter()
            .map(|&c| {
                let loss_without = self.loo_loss(c, acts, labels)?;
                Ok(ClientContribution {
                    client: c,
                    importance: importance_from_losses(loss_all, loss_without)?,
                    loss_without,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ContributionReport {
            round,
            loss_all,
            clients,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenseLayer;
    use crate::rng::standard_normal;

    fn acts(rows: usize, dims: &[usize], seed: u64) -> Vec<ActivationBatch> {
        let mut rng = rng_stream(seed, "test-acts", 0, 0);
        dims.iter()
            .enumerate()
            .map(|(c, &d)| ActivationBatch {
                client: c,
                values: Matrix::from_fn(rows, d, |_, _| standard_normal(&mut rng)),
                noisy: false,
            })
            .collect()
    }

    fn ce_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &y) in logits.iter().zip(labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[y].exp() / z).ln();
        }
        total / labels.len() as f64
    }

    fn linear_oracle(head: &Mlp, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let l = &head.layers()[0];
        x.iter()
            .map(|row| {
                (0..l.out_dim())
                    .map(|k| {
                        l.bias()[k]
                            + row
                                .iter()
                                .enumerate()
                                .map(|(j, v)| v * l.weights().get(j, k))
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn importance_formula() {
        assert_eq!(importance_from_losses(0.8, 0.8).unwrap(), 0.0);
        assert!((importance_from_losses(0.8, 1.6).unwrap() - 100.0).abs() < 1e-12);
        assert!(importance_from_losses(0.5, 0.4).unwrap() < 0.0);
        assert!(matches!(
            importance_from_losses(0.0, 1.0),
            Err(Error::DegenerateLoss(_))
        ));
    }

    #[test]
    fn untrained_head_is_near_uniform() {
        let bank = HeadBank::new(&[0, 1, 2], &[4, 4, 4], &[], 10, 3, 0).unwrap();
        let a = acts(64, &[4, 4, 4], 1)
            .into_iter()
            .map(|mut b| {
                b.values = b.values.scale(0.1);
                b
            })
            .collect::<Vec<_>>();
        let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
        let loss = bank.global_loss(&a, &labels).unwrap();
        assert!((loss - 10f64.ln()).abs() < 0.2, "{loss}");
    }

    #[test]
    fn losses_match_scalar_oracle() {
        let bank = HeadBank::new(&[0, 1, 2], &[2, 3, 1], &[], 4, 8, 0).unwrap();
        let a = acts(8, &[2, 3, 1], 2);
        let labels = [0, 1, 2, 3, 3, 2, 1, 0];
        let rows_all: Vec<Vec<f64>> = (0..8)
            .map(|r| a.iter().flat_map(|b| b.values.row(r).to_vec()).collect())
            .collect();
        let oracle = ce_oracle(&linear_oracle(bank.global_head(), &rows_all), &labels);
        assert!((bank.global_loss(&a, &labels).unwrap() - oracle).abs() < 1e-12);

        let rows_wo1: Vec<Vec<f64>> = (0..8)
            .map(|r| {
                a.iter()
                    .filter(|b| b.client != 1)
                    .flat_map(|b| b.values.row(r).to_vec())
                    .collect()
            })
            .collect();
        let oracle = ce_oracle(&linear_oracle(bank.loo_head(1).unwrap(), &rows_wo1), &labels);
        assert!((bank.loo_loss(1, &a, &labels).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn two_client_loo_head_reads_only_the_other_client() {
        let bank = HeadBank::new(&[0, 1], &[3, 2], &[], 3, 1, 0).unwrap();
        assert_eq!(bank.loo_head(0).unwrap().input_dim(), 2);
        let mut a = acts(5, &[3, 2], 4);
        let labels = [0, 1, 2, 0, 1];
        let before = bank.loo_loss(0, &a, &labels).unwrap();
        a[0].values = a[0].values.scale(-7.0);
        assert_eq!(bank.loo_loss(0, &a, &labels).unwrap(), before);
    }

    #[test]
    fn column_permutation_symmetry() {
        // Swapping the two clients' activations together with the matching
        // row blocks of the global weight matrix leaves loss_N unchanged.
        let bank = HeadBank::new(&[0, 1], &[2, 2], &[], 3, 5, 0).unwrap();
        let a = acts(6, &[2, 2], 7);
        let labels = [0, 1, 2, 2, 1, 0];
        let loss = bank.global_loss(&a, &labels).unwrap();

        let mut swapped = bank.clone();
        let w = bank.global_head().layers()[0].weights().clone();
        let perm = [2, 3, 0, 1];
        let w2 = Matrix::from_fn(4, 3, |r, c| w.get(perm[r], c));
        let bias = bank.global_head().layers()[0].bias().to_vec();
        *swapped.global_head_mut() =
            Mlp::new(vec![DenseLayer::new(w2, bias, crate::nn::Activation::Identity).unwrap()]).unwrap();
        let b = vec![
            ActivationBatch {
                client: 0,
                values: a[1].values.clone(),
                noisy: false,
            },
            ActivationBatch {
                client: 1,
                values: a[0].values.clone(),
                noisy: false,
            },
        ];
        assert!((swapped.global_loss(&b, &labels).unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn twin_clients_have_equal_loo_losses() {
        let mut bank = HeadBank::new(&[0, 1, 2], &[2, 2, 3], &[], 3, 9, 0).unwrap();
        let mut a = acts(10, &[2, 2, 3], 3);
        a[1].values = a[0].values.clone();
        // Synchronize the two leave-one-out heads.
        let h0 = bank.loo_head(0).unwrap().clone();
        *bank.loo_head_mut(1).unwrap() = h0;
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let l0 = bank.loo_loss(0, &a, &labels).unwrap();
        let l1 = bank.loo_loss(1, &a, &labels).unwrap();
        assert_eq!(l0, l1);
    }

    #[test]
    fn training_moves_heads_and_zero_lr_does_not() {
        let mut bank = HeadBank::new(&[0, 1], &[3, 3], &[], 4, 2, 0).unwrap();
        let a = acts(12, &[3, 3], 5);
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let frozen = bank.clone();
        bank.train_heads(&a, &labels, 0.0).unwrap();
        assert_eq!(bank.global_head(), frozen.global_head());
        assert_eq!(bank.loo_head(1).unwrap(), frozen.loo_head(1).unwrap());
        let step = bank.train_heads(&a, &labels, 0.1).unwrap();
        assert_ne!(bank.global_head(), frozen.global_head());
        assert_ne!(bank.loo_head(0).unwrap(), frozen.loo_head(0).unwrap());
        assert_eq!(step.input_grads.len(), 2);
        assert_eq!(step.input_grads[0].shape(), (12, 3));
    }

    #[test]
    fn returned_gradients_come_from_the_global_head_only() {
        let mut bank = HeadBank::new(&[0, 1, 2], &[2, 3, 2], &[], 3, 4, 0).unwrap();
        let a = acts(7, &[2, 3, 2], 6);
        let labels = [0, 1, 2, 0, 1, 2, 0];
        let (_, expected) = bank.global_loss_with_input_grads(&a, &labels).unwrap();
        // Scrambling a leave-one-out head must not change what clients receive.
        let mut other = bank.clone();
        for layer in other.loo_head_mut(1).unwrap().layers_mut() {
            layer.weights_mut().data_mut().iter_mut().for_each(|w| *w = 3.0);
        }
        let s1 = bank.train_heads(&a, &labels, 0.1).unwrap();
        let s2 = other.train_heads(&a, &labels, 0.1).unwrap();
        assert_eq!(s1.input_grads, expected);
        assert_eq!(s1.input_grads, s2.input_grads);
    }

    #[test]
    fn mismatched_active_set_is_rejected() {
        let bank = HeadBank::new(&[0, 1, 2], &[2, 2, 2], &[], 3, 1, 0).unwrap();
        let a = acts(4, &[2, 2], 1);
        assert!(matches!(bank.global_loss(&a, &[0, 1, 2, 0]), Err(Error::Shape { .. })));
        assert!(matches!(
            bank.loo_loss(5, &acts(4, &[2, 2, 2], 1), &[0, 1, 2, 0]),
            Err(Error::InactiveClient(5))
        ));
    }

    #[test]
    fn dropping_rebuilds_with_consistent_dims() {
        let bank = HeadBank::new(&[0, 1, 2, 3], &[2, 3, 4, 5], &[], 3, 1, 0).unwrap();
        let smaller = bank.without(&[1]).unwrap();
        assert_eq!(smaller.clients(), &[0, 2, 3]);
        assert_eq!(smaller.global_head().input_dim(), 11);
        assert_eq!(smaller.loo_head(2).unwrap().input_dim(), 7);
        assert!(smaller.loo_head(1).is_err());
        assert_eq!(smaller.generation(), 1);
        assert!(bank.without(&[0, 1, 2]).is_err());
    }
}
