//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod invariants;

use opus_vfl::contribution::{importance_from_losses, HeadBank};
use opus_vfl::dp::{gaussian_sigma, noise_grad_epsilon, perturb, perturb_with_draw, PrivacyBudget};
use opus_vfl::epsilon::{compute_gs_h, grad_contribution};
use opus_vfl::incentive::ClientEconomics;
use opus_vfl::messages::ActivationBatch;
use opus_vfl::nn::{softmax_cross_entropy, Mlp};
use opus_vfl::rng::{rng_stream, standard_normal, Stream};
use opus_vfl::Matrix;
use rand::Rng;

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut Stream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb == 0.0 {
        0.0
    } else {
        diff / (na + nb)
    }
}

fn ce_loss(net: &Mlp, x: &Matrix, labels: &[usize]) -> f64 {
    softmax_cross_entropy(&net.predict(x).unwrap(), labels).unwrap().0
}

/// Worst relative error between backprop and central differences over every
/// parameter tensor and the input gradient of one random net.
pub fn mlp_gradient_error(seed: u64) -> f64 {
    let mut rng = rng_stream(seed, "gradcheck", 0, 0);
    let input = rng.random_range(1..=6);
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=7)).collect();
    let classes = rng.random_range(2..=5);
    let batch = rng.random_range(2..=5);
    let mut net = Mlp::fcnn(input, &hidden, classes, &mut rng).unwrap();
    // Nonzero biases so the check covers them too.
    for layer in net.layers_mut() {
        for b in layer.bias_mut() {
            *b = 0.1 * standard_normal(&mut rng);
        }
    }
    let x = normal_matrix(batch, input, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

    let (out, tape) = net.forward(&x).unwrap();
    let (_, grad_out) = softmax_cross_entropy(&out, &labels).unwrap();
    let (grads, grad_in) = net.backward(tape, &grad_out).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for l in 0..net.layers().len() {
        let (rows, cols) = net.layers()[l].weights().shape();
        let mut numeric = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let w0 = net.layers()[l].weights().get(r, c);
                net.layers_mut()[l].weights_mut().set(r, c, w0 + h);
                let up = ce_loss(&net, &x, &labels);
                net.layers_mut()[l].weights_mut().set(r, c, w0 - h);
                let down = ce_loss(&net, &x, &labels);
                net.layers_mut()[l].weights_mut().set(r, c, w0);
                numeric.push((up - down) / (2.0 * h));
            }
        }
        worst = worst.max(rel_err(grads.layers[l].weights.data(), &numeric));

        let n = net.layers()[l].bias().len();
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let b0 = net.layers()[l].bias()[j];
            net.layers_mut()[l].bias_mut()[j] = b0 + h;
            let up = ce_loss(&net, &x, &labels);
            net.layers_mut()[l].bias_mut()[j] = b0 - h;
            let down = ce_loss(&net, &x, &labels);
            net.layers_mut()[l].bias_mut()[j] = b0;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&grads.layers[l].bias, &numeric));
    }

    let mut numeric = Vec::with_capacity(batch * input);
    for r in 0..batch {
        for c in 0..input {
            let mut xp = x.clone();
            xp.set(r, c, x.get(r, c) + h);
            let mut xm = x.clone();
            xm.set(r, c, x.get(r, c) - h);
            numeric.push((ce_loss(&net, &xp, &labels) - ce_loss(&net, &xm, &labels)) / (2.0 * h));
        }
    }
    worst.max(rel_err(grad_in.data(), &numeric))
}

/// Relative error of the analytic `∂h/∂ε` against a central difference of
/// `h(ε) = a + σ(ε) r` with the draw `r` held fixed.
pub fn dh_deps_error(epsilon: f64) -> f64 {
    let mut rng = rng_stream(11, "dh-deps", 0, 0);
    let a = normal_matrix(6, 4, &mut rng);
    let r = normal_matrix(6, 4, &mut rng);
    let (delta, df) = (0.01, 0.5);
    let budget = PrivacyBudget::new(epsilon, (0.5, 5.0), delta, df, 0.0).unwrap();
    let (_, record) = perturb_with_draw(0, &a, &budget, r.clone()).unwrap();
    let analytic = noise_grad_epsilon(&record, &budget).unwrap();

    let h = 1e-5 * epsilon;
    let at = |e: f64| {
        let s = gaussian_sigma(e, delta, df).unwrap();
        a.zip_map(&r, |x, z| x + s * z).unwrap()
    };
    let up = at(epsilon + h);
    let down = at(epsilon - h);
    let numeric = up.zip_map(&down, |u, d| (u - d) / (2.0 * h)).unwrap();
    rel_err(analytic.data(), numeric.data())
}

/// Relative error of the sample standard deviation of 10^6 noise draws
/// against the closed-form sigma.
pub fn empirical_sigma_error() -> f64 {
    let budget = PrivacyBudget::new(1.0, (0.5, 5.0), 0.01, 0.5, 0.0).unwrap();
    let sigma = gaussian_sigma(1.0, 0.01, 0.5).unwrap();
    let zeros = Matrix::zeros(1000, 1000);
    let mut rng = rng_stream(5, "calibration", 0, 0);
    let (noisy, _) = perturb(0, &zeros, &budget, &mut rng).unwrap();
    let n = noisy.data().len() as f64;
    let mean = noisy.data().iter().sum::<f64>() / n;
    let var = noisy.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var.sqrt() - sigma).abs() / sigma
}

/// A frozen round: heads, clean activations, labels and one client's draw.
pub struct FrozenRound {
    pub bank: HeadBank,
    pub clean: Vec<Matrix>,
    pub draw: Matrix,
    pub labels: Vec<usize>,
    pub client: usize,
    pub econ: ClientEconomics,
}

impl FrozenRound {
    pub fn new(seed: u64) -> Self {
        let clients = [0usize, 1, 2];
        let dims = [3usize, 4, 3];
        let bank = HeadBank::new(&clients, &dims, &[6], 4, seed, 0).unwrap();
        let mut rng = rng_stream(seed, "frozen-round", 0, 0);
        let m = 8;
        let clean: Vec<Matrix> = dims.iter().map(|&d| normal_matrix(m, d, &mut rng)).collect();
        let draw = normal_matrix(m, dims[1], &mut rng);
        let labels = (0..m).map(|i| i % 4).collect();
        let econ = ClientEconomics {
            resource_fraction: 0.64,
            beta: 2.0,
            ..Default::default()
        };
        Self {
            bank,
            clean,
            draw,
            labels,
            client: 1,
            econ,
        }
    }

    fn budget(&self, epsilon: f64) -> PrivacyBudget {
        PrivacyBudget::new(epsilon, (0.1, 10.0), 0.01, 0.3, 0.0).unwrap()
    }

    fn acts(&self, epsilon: f64) -> Vec<ActivationBatch> {
        let budget = self.budget(epsilon);
        self.clean
            .iter()
            .enumerate()
            .map(|(c, a)| {
                let values = if c == self.client {
                    perturb_with_draw(c, a, &budget, self.draw.clone()).unwrap().0
                } else {
                    a.clone()
                };
                ActivationBatch {
                    client: c,
                    values,
                    noisy: c == self.client,
                }
            })
            .collect()
    }

    /// `R(ε) = α I C^{1/a} + β Δf / ε`, with the importance left unfloored.
    pub fn reward_at(&self, epsilon: f64) -> f64 {
        let acts = self.acts(epsilon);
        let all = self.bank.global_loss(&acts, &self.labels).unwrap();
        let without = self.bank.loo_loss(self.client, &acts, &self.labels).unwrap();
        let i = importance_from_losses(all, without).unwrap();
        let w = self.econ.resource_fraction.powf(1.0 / self.econ.equity_exponent);
        self.econ.alpha * i * w + self.econ.beta * 0.3 / epsilon
    }

    pub fn analytic_g(&self, epsilon: f64) -> f64 {
        let budget = self.budget(epsilon);
        let acts = self.acts(epsilon);
        let gs = compute_gs_h(&self.bank, &acts, &self.labels, self.client, &self.econ).unwrap();
        let (_, record) = perturb_with_draw(self.client, &self.clean[self.client], &budget, self.draw.clone()).unwrap();
        let dh = noise_grad_epsilon(&record, &budget).unwrap();
        grad_contribution(&gs, &dh, &self.econ, &budget).unwrap()
    }

    pub fn g_error(&self, epsilon: f64) -> f64 {
        let h = 1e-5 * epsilon;
        let numeric = (self.reward_at(epsilon + h) - self.reward_at(epsilon - h)) / (2.0 * h);
        let analytic = self.analytic_g(epsilon);
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
    }
}
