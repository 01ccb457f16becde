//! Robustness harness: backdoor poisoning and two simplified inference
//! proxies.
//!
//! The label-inference proxy clusters the per-sample gradient rows a client
//! receives and scores the best cluster-to-label matching. The
//! feature-inference proxy trains a decoder from a victim's transmitted
//! activations back to its features on an auxiliary set. Both are stand-ins
//! that measure leakage direction; neither reproduces a published attack.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BackdoorConfig, Mode};
use crate::data::{Dataset, VerticalPartition};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::messages::{GradientMessage, RoundObserver};
use crate::nn::Mlp;
use crate::rng::{rng_stream, NO_ROUND, SERVER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorSpec {
    pub attacker: usize,
    /// `pd`
    pub poison_fraction: f64,
    pub target: usize,
    /// Global column indices set to 1.0 by the trigger.
    pub trigger_columns: Vec<usize>,
}

impl BackdoorSpec {
    /// Trigger band of `cfg.trigger_width` columns starting at
    /// `cfg.trigger_offset` inside the attacker's columns.
    pub fn from_config(cfg: &BackdoorConfig, partition: &VerticalPartition) -> Result<Self> {
        if cfg.attacker >= partition.num_clients() {
            return Err(Error::Attack(format!("attacker {} is not a client", cfg.attacker)));
        }
        let own = partition.columns(cfg.attacker);
        let end = cfg.trigger_offset + cfg.trigger_width;
        if cfg.trigger_width == 0 || end > own.len() {
            return Err(Error::Attack(format!(
                "trigger columns {}..{end} fall outside the attacker's {} columns",
                cfg.trigger_offset,
                own.len()
            )));
        }
        Ok(Self {
            attacker: cfg.attacker,
            poison_fraction: cfg.poison_fraction,
            target: cfg.target,
            trigger_columns: own[cfg.trigger_offset..end].to_vec(),
        })
    }

    pub fn validate(&self, partition: &VerticalPartition, classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.poison_fraction) {
            return Err(Error::Attack(format!(
                "poison fraction {} outside [0, 1]",
                self.poison_fraction
            )));
        }
        if self.target >= classes {
            return Err(Error::Attack(format!("target class {} >= {classes}", self.target)));
        }
        if let Some(c) = self
            .trigger_columns
            .iter()
            .find(|&&c| partition.owner(c) != Some(self.attacker))
        {
            return Err(Error::Attack(format!(
                "trigger column {c} is not owned by the attacker"
            )));
        }
        Ok(())
    }
}

/// Write the trigger into every row of `features`.
pub fn apply_trigger(features: &Matrix, spec: &BackdoorSpec) -> Matrix {
    let mut out = features.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for &c in &spec.trigger_columns {
            row[c] = 1.0;
        }
    }
    out
}

/// A `round(pd · m)`-sample subset gets the trigger and the target label.
/// Returns the poisoned dataset and the sorted poisoned indices.
pub fn poison_dataset(
    ds: &Dataset,
    partition: &VerticalPartition,
    spec: &BackdoorSpec,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    spec.validate(partition, ds.num_classes)?;
    let count = (spec.poison_fraction * ds.len() as f64).round() as usize;
    let mut rng = rng_stream(seed, "backdoor-poison", spec.attacker as u64, NO_ROUND);
    let mut chosen = index::sample(&mut rng, ds.len(), count).into_vec();
    chosen.sort_unstable();
    let mut out = ds.clone();
    for &i in &chosen {
        let row = out.features.row_mut(i);
        for &c in &spec.trigger_columns {
            row[c] = 1.0;
        }
        out.labels[i] = spec.target;
    }
    out.name = format!("{}-poisoned", ds.name);
    Ok((out, chosen))
}

/// Fraction of triggered non-target test samples classified as the target.
pub fn eval_asr(predict: impl Fn(&Matrix) -> Result<Vec<usize>>, spec: &BackdoorSpec, test: &Dataset) -> Result<f64> {
    let eligible: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] != spec.target).collect();
    if eligible.is_empty() {
        return Err(Error::Attack("no test samples outside the target class".into()));
    }
    let triggered = apply_trigger(&test.features.select_rows(&eligible), spec);
    let predictions = predict(&triggered)?;
    let hits = predictions.iter().filter(|&&p| p == spec.target).count();
    Ok(hits as f64 / eligible.len() as f64)
}

/// Keeps the most recent gradient rows delivered to one client.
#[derive(Debug, Clone)]
pub struct GradientCollector {
    pub client: usize,
    capacity: usize,
    rows: VecDeque<(usize, Vec<f64>)>,
}

impl GradientCollector {
    pub fn new(client: usize, capacity: usize) -> Self {
        Self {
            client,
            capacity,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Gradient rows and the training-sample index of each.
    pub fn matrix(&self) -> Result<(Matrix, Vec<usize>)> {
        let cols = self.rows.front().map(|(_, g)| g.len()).unwrap_or(0);
        let data: Vec<f64> = self.rows.iter().flat_map(|(_, g)| g.iter().copied()).collect();
        let idx = self.rows.iter().map(|(i, _)| *i).collect();
        Ok((Matrix::from_vec(self.rows.len(), cols, data)?, idx))
    }
}

impl RoundObserver for GradientCollector {
    fn on_gradient(&mut self, message: &GradientMessage<'_>) {
        if message.recipient != self.client {
            return;
        }
        for (k, &sample) in message.sample_indices.iter().enumerate() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back((sample, message.gradient.row(k).to_vec()));
        }
    }
}

/// Seeded k-means (k-means++ initialization, Lloyd iterations).
/// Returns the cluster of every row.
pub fn kmeans(points: &Matrix, k: usize, iterations: usize, seed: u64) -> Result<Vec<usize>> {
    let (n, d) = points.shape();
    if k == 0 || n < k {
        return Err(Error::Attack(format!("k-means needs at least k = {k} points, got {n}")));
    }
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut rng = rng_stream(seed, "kmeans-init", SERVER, NO_ROUND);
    let mut centers = Matrix::zeros(k, d);
    centers.row_mut(0).copy_from_slice(points.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(points.row(i), centers.row(0))).collect();
    for j in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(j).copy_from_slice(points.row(pick));
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(dist2(points.row(i), centers.row(j)));
        }
    }

    let mut assign = vec![0; n];
    for _ in 0..iterations.max(1) {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&x, &y| dist2(points.row(i), centers.row(x)).total_cmp(&dist2(points.row(i), centers.row(y))))
                .unwrap_or(0);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for (j, &n) in counts.iter().enumerate() {
            if n > 0 {
                let inv = 1.0 / n as f64;
                for (c, s) in centers.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s * inv;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(assign)
}

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian
/// method with potentials). Returns `col_of_row`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays, with index 0 as the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Share of samples whose cluster maps to their label under the best
/// one-to-one cluster-to-label matching.
pub fn matching_accuracy(clusters: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    if clusters.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape("matching_accuracy", labels.len(), clusters.len()));
    }
    let mut counts = vec![vec![0.0; k]; k];
    for (&c, &y) in clusters.iter().zip(labels) {
        if c >= k || y >= k {
            return Err(Error::InvalidArgument(format!("cluster {c} or label {y} >= {k}")));
        }
        counts[c][y] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let matched: f64 = hungarian(&cost).iter().enumerate().map(|(c, &y)| counts[c][y]).sum();
    Ok(matched / labels.len() as f64)
}

/// Cluster unit-normalized gradient rows into `k` groups and score them
/// against the true labels.
pub fn label_inference_proxy(
    gradients: &Matrix,
    labels: &[usize],
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    if gradients.rows() < k * 50 {
        return Err(Error::Attack(format!(
            "label inference needs at least {} gradient rows, got {}",
            k * 50,
            gradients.rows()
        )));
    }
    if gradients.data().iter().all(|&g| g == 0.0) {
        return Err(Error::Attack("all received gradients are zero".into()));
    }
    let mut unit = gradients.clone();
    for r in 0..unit.rows() {
        let row = unit.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let clusters = kmeans(&unit, k, iterations, seed)?;
    matching_accuracy(&clusters, labels, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureInference {
    /// Mean over samples of `Σ_j (x_j − x̂_j)² / D` on held-out samples.
    pub mse: f64,
    /// Same for the constant predictor at the held-out feature mean,
    /// i.e. the mean per-feature variance.
    pub baseline_mse: f64,
}

/// Settings for the decoder used by [`feature_inference_proxy`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSettings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

pub fn mean_squared_error(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    pred.same_shape(truth, "mean_squared_error")?;
    let diff = pred.zip_map(truth, |a, b| a - b)?;
    Ok(diff.sum_squares() / (truth.rows() * truth.cols()) as f64)
}

/// Constant predictor at the column means of `truth`.
pub fn constant_baseline_mse(truth: &Matrix) -> f64 {
    let m = truth.rows() as f64;
    let means: Vec<f64> = truth.column_sums().into_iter().map(|s| s / m).collect();
    let mut total = 0.0;
    for r in 0..truth.rows() {
        for (v, mu) in truth.row(r).iter().zip(&means) {
            total += (v - mu) * (v - mu);
        }
    }
    total / (truth.rows() * truth.cols()) as f64
}

/// Train a decoder from activations to features on the auxiliary pairs and
/// report its error on the held-out pairs.
pub fn feature_inference_proxy(
    aux_acts: &Matrix,
    aux_features: &Matrix,
    eval_acts: &Matrix,
    eval_features: &Matrix,
    settings: &DecoderSettings,
) -> Result<FeatureInference> {
    if aux_acts.rows() < 500 {
        return Err(Error::Attack(format!(
            "feature inference needs at least 500 auxiliary samples, got {}",
            aux_acts.rows()
        )));
    }
    if aux_acts.rows() != aux_features.rows() || eval_acts.rows() != eval_features.rows() {
        return Err(Error::shape(
            "feature_inference_proxy rows",
            aux_acts.rows(),
            aux_features.rows(),
        ));
    }
    let mut rng = rng_stream(settings.seed, "decoder-init", SERVER, NO_ROUND);
    let mut decoder = Mlp::fcnn(aux_acts.cols(), &settings.hidden, aux_features.cols(), &mut rng)?;
    let m = aux_acts.rows();
    let bs = settings.batch_size.clamp(1, m);
    for epoch in 0..settings.epochs {
        let mut order_rng = rng_stream(settings.seed, "decoder-order", SERVER, epoch as u64);
        let order = crate::rng::permutation(m, &mut order_rng);
        for chunk in order.chunks(bs) {
            let x = aux_acts.select_rows(chunk);
            let y = aux_features.select_rows(chunk);
            let (out, tape) = decoder.forward(&x)?;
            let scale = 2.0 / chunk.len() as f64;
            let grad = out.zip_map(&y, |a, b| (a - b) * scale)?;
            let (g, _) = decoder.backward(tape, &grad)?;
            decoder.sgd_step(&g, settings.lr)?;
        }
    }
    let pred = decoder.predict(eval_acts)?;
    Ok(FeatureInference {
        mse: mean_squared_error(&pred, eval_features)?,
        baseline_mse: constant_baseline_mse(eval_features),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub mode: Mode,
    pub clean_accuracy: f64,
    pub poison_fraction: Option<f64>,
    pub asr: Option<f64>,
    /// Label-inference proxy accuracy.
    pub label_inference_proxy_accuracy: Option<f64>,
    /// Feature-inference proxy result.
    pub feature_inference_proxy: Option<FeatureInference>,
}
