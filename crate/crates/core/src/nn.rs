//! Dense feed-forward networks with exact backpropagation.
//!
//! Client bottom models, the server head and the leave-one-out heads are all
//! [`Mlp`]s. `backward` returns the gradient with respect to the network input
//! as well as the parameter gradients: the server's input gradient is what a
//! client receives each round, and it also feeds the ε adaptation.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = activation(x W + b)` with `W` stored as `in_dim × out_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::shape("DenseLayer::new", weights.cols(), bias.len()));
        }
        weights.ensure_finite("DenseLayer::new")?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Matrix::from_fn(in_dim, out_dim, |_, _| rng.random_range(-limit..=limit));
        Self {
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Cached intermediates of one forward pass.
///
/// `backward` takes the tape by value, so a tape can be used once.
#[derive(Debug)]
pub struct ForwardTape {
    stamp: u64,
    /// `inputs[k]` is the input to layer `k`; the last entry is the output.
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    pub fn output(&self) -> &Matrix {
        self.inputs.last().expect("tape holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Matrix::zeros(l.in_dim(), l.out_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.data().iter().all(|&w| w == 0.0) && l.bias.iter().all(|&b| b == 0.0))
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an Mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "Mlp::new layer chain",
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    /// Fully connected net: ReLU on every hidden layer, identity output.
    ///
    /// `hidden = []` gives a single affine layer (FCNN-1); one hidden layer
    /// gives FCNN-2, two give FCNN-3.
    pub fn fcnn<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(DenseLayer::out_dim).unwrap_or(0)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim() * l.out_dim() + l.out_dim()).sum()
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardTape)> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape("Mlp::forward input", self.input_dim(), input.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        inputs.push(input.clone());
        for layer in &self.layers {
            let mut z = inputs.last().unwrap().matmul(&layer.weights)?;
            z.add_row_vector(&layer.bias);
            let a = match layer.activation {
                Activation::Identity => z.clone(),
                act => z.map(|v| act.apply(v)),
            };
            pre_activations.push(z);
            inputs.push(a);
        }
        let output = inputs.last().unwrap().clone();
        output.ensure_finite("Mlp::forward")?;
        Ok((
            output,
            ForwardTape {
                stamp: self.stamp,
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape("Mlp::predict input", self.input_dim(), input.cols()));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = x.matmul(&layer.weights)?;
            z.add_row_vector(&layer.bias);
            if layer.activation == Activation::Relu {
                z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = z;
        }
        x.ensure_finite("Mlp::predict")?;
        Ok(x)
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, tape: ForwardTape, grad_output: &Matrix) -> Result<(ParamGrads, Matrix)> {
        if tape.stamp != self.stamp || tape.pre_activations.len() != self.layers.len() {
            return Err(Error::StaleTape);
        }
        let out = tape.output();
        if out.shape() != grad_output.shape() {
            return Err(Error::shape(
                "Mlp::backward grad_output",
                format!("{}x{}", out.rows(), out.cols()),
                format!("{}x{}", grad_output.rows(), grad_output.cols()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let dz = match layer.activation {
                Activation::Identity => upstream,
                act => upstream.zip_map(&tape.pre_activations[k], |g, z| g * act.derivative(z))?,
            };
            let dw = tape.inputs[k].t_matmul(&dz)?;
            let db = dz.column_sums();
            upstream = dz.matmul_t(&layer.weights)?;
            grads.push(LayerGrads { weights: dw, bias: db });
        }
        grads.reverse();
        let grads = ParamGrads { layers: grads };
        if !grads.is_finite() || !upstream.is_finite() {
            return Err(Error::NonFinite("Mlp::backward"));
        }
        Ok((grads, upstream))
    }

    pub fn sgd_step(&mut self, grads: &ParamGrads, learning_rate: f64) -> Result<()> {
        sgd_step(self, grads, learning_rate)
    }
}

/// Plain SGD: every parameter moves by `-learning_rate * grad`.
pub fn sgd_step(model: &mut Mlp, grads: &ParamGrads, learning_rate: f64) -> Result<()> {
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be a finite non-negative number, got {learning_rate}"
        )));
    }
    if grads.layers.len() != model.layers.len() {
        return Err(Error::shape("sgd_step layers", model.layers.len(), grads.layers.len()));
    }
    for (layer, g) in model.layers.iter().zip(&grads.layers) {
        if layer.weights.shape() != g.weights.shape() || layer.bias.len() != g.bias.len() {
            return Err(Error::shape(
                "sgd_step layer",
                format!("{}x{}", layer.in_dim(), layer.out_dim()),
                format!("{}x{}", g.weights.rows(), g.weights.cols()),
            ));
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("sgd_step gradients"));
    }
    if learning_rate == 0.0 {
        return Ok(());
    }
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        for (w, d) in layer.weights.data_mut().iter_mut().zip(g.weights.data()) {
            *w -= learning_rate * d;
        }
        for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= learning_rate * d;
        }
    }
    model.stamp = fresh_stamp();
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (m, classes) = logits.shape();
    if labels.len() != m {
        return Err(Error::shape("softmax_cross_entropy labels", m, labels.len()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_m = 1.0 / m as f64;
    let mut grad = Matrix::zeros(m, classes);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        loss += log_norm - row[y];
        let g = grad.row_mut(r);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = (row[c] - log_norm).exp() * inv_m;
        }
        g[y] -= inv_m;
    }
    let loss = loss * inv_m;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, grad))
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}
