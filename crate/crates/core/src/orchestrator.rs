//! The round protocol.
//!
//! Each round: (a) draw a training batch and, when accounting, a disjoint
//! held-out batch from the training split; (b) every active client runs its
//! bottom model; (c) in opus mode the activations are noised; (d) the server
//! trains its heads; (e) it returns each client's slice of the input
//! gradient; (f) clients backpropagate and step; (g) after warm-up the
//! server scores contributions, pays tokens, adapts ε and applies dropout;
//! (h) the round is logged.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{Client, Release};
use crate::config::{DataSource, ExperimentConfig, Mode};
use crate::contribution::{ContributionReport, HeadBank};
use crate::data::{
    load_mnist, partition, synthetic_dataset, Batch, BatchSampler, Dataset, PartitionScheme, VerticalPartition,
};
use crate::dp::{noise_grad_epsilon, snr_db_from_energy};
use crate::epsilon::{grad_contribution, gs_h_from_parts, update_epsilon, EpsilonTrace};
use crate::error::{Error, Result};
use crate::incentive::{
    apply_dropout, distribute_tokens, reward, to_tokens, utility, DropoutEvent, LedgerRow, RewardLedger, TokenPool,
};
use crate::log::LogRow;
use crate::matrix::Matrix;
use crate::messages::{ActivationBatch, BatchKind, GradientMessage, RoundObserver, Upload};
use crate::rng::{rng_stream, SERVER};

/// Rows per chunk when predicting over a whole split.
const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    /// Dropout left fewer than two clients.
    InsufficientClients {
        round: usize,
        dropped: Vec<usize>,
        remaining: usize,
    },
}

/// Everything produced by one round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    /// Global-head loss on the training batch.
    pub train_loss: f64,
    pub contribution: Option<ContributionReport>,
    pub ledger_rows: Vec<LedgerRow>,
    pub dropped: Vec<usize>,
    pub test_accuracy: Option<f64>,
}

/// Training and test data with the client column assignment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: VerticalPartition,
    /// `init_keys[c]` names the stream that initializes client `c`.
    pub init_keys: Vec<usize>,
}

fn limit(ds: Dataset, n: usize, suffix: &str) -> Dataset {
    if n == 0 || n >= ds.len() {
        return ds;
    }
    let idx: Vec<usize> = (0..n).collect();
    ds.subset(&idx, suffix)
}

/// Load the configured dataset and build the partition, including a twin
/// client when requested.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.data;
    let (train, test) = match d.source {
        DataSource::Mnist => {
            let s = load_mnist(&d.path)?;
            (s.train, s.test)
        }
        DataSource::Synthetic => {
            let informative: Vec<usize> = (0..d.informative.min(d.features)).collect();
            let all = synthetic_dataset(
                d.samples + d.test_samples,
                d.features,
                d.classes,
                &informative,
                cfg.training.seed,
            )?;
            all.split_at(d.samples)?
        }
        DataSource::Csv => (
            Dataset::read_csv(&d.path.join("train.csv"), d.classes)?,
            Dataset::read_csv(&d.path.join("test.csv"), d.classes)?,
        ),
    };
    let train = limit(train, d.train_limit, "limited");
    let test = limit(test, d.test_limit, "limited");
    let p = &cfg.partition;
    let base = partition(train.dim(), p.clients, &p.scheme())?;
    let mut init_keys: Vec<usize> = (0..p.clients).collect();
    let Some(k) = p.twin_of else {
        return Ok(Prepared {
            train,
            test,
            partition: base,
            init_keys,
        });
    };
    let cols = base.columns(k).to_vec();
    let dim = train.dim();
    let train = train.with_duplicated_columns(&cols);
    let test = test.with_duplicated_columns(&cols);
    let mut lists: Vec<Vec<usize>> = (0..p.clients).map(|c| base.columns(c).to_vec()).collect();
    lists.push((dim..dim + cols.len()).collect());
    init_keys.push(k);
    let partition = partition(dim + cols.len(), p.clients + 1, &PartitionScheme::Explicit(lists))?;
    Ok(Prepared {
        train,
        test,
        partition,
        init_keys,
    })
}

/// `k` training-split indices disjoint from `exclude`, from the round's
/// own stream.
pub fn draw_eval_indices(seed: u64, round: usize, samples: usize, k: usize, exclude: &[usize]) -> Vec<usize> {
    let mut rng = rng_stream(seed, "eval-batch", SERVER, round as u64);
    let excluded: HashSet<usize> = exclude.iter().copied().collect();
    let amount = (k + exclude.len()).min(samples);
    index::sample(&mut rng, samples, amount)
        .into_iter()
        .filter(|i| !excluded.contains(i))
        .take(k)
        .collect()
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("accuracy", labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty split".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub struct Simulation {
    cfg: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    partition: VerticalPartition,
    clients: Vec<Client>,
    active: Vec<usize>,
    bank: HeadBank,
    ledger: RewardLedger,
    traces: Vec<EpsilonTrace>,
    sampler: BatchSampler,
    eval_every: usize,
    round: usize,
    status: RunStatus,
    log: Vec<LogRow>,
    accuracy_history: Vec<(usize, f64)>,
    round_seconds: Vec<f64>,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig, data: Prepared) -> Result<Self> {
        cfg.check_structure()?;
        let Prepared {
            train,
            test,
            partition,
            init_keys,
        } = data;
        let n = partition.num_clients();
        let seed = cfg.training.seed;
        let m = &cfg.model;
        if m.batch_size > train.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds {} training samples",
                m.batch_size,
                train.len()
            )));
        }
        let clients = (0..n)
            .map(|c| {
                Client::new(
                    c,
                    init_keys[c],
                    partition.columns(c).len(),
                    &m.client_hidden,
                    m.embedding,
                    seed,
                    cfg.privacy.budget_for(c)?,
                    cfg.incentive.economics_for(c),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let active: Vec<usize> = (0..n).collect();
        let dims = vec![m.embedding; n];
        let bank = HeadBank::new(&active, &dims, &m.server_hidden, train.num_classes, seed, 0)?;
        let pool = TokenPool::new(cfg.incentive.budget_scope, cfg.incentive.budget)?;
        let ledger = RewardLedger::new(&active, cfg.training.warmup, cfg.training.rounds, pool);
        let sampler = BatchSampler::new(train.len(), m.batch_size, seed)?;
        let eval_every = if cfg.training.eval_every == 0 {
            sampler.batches_per_epoch()
        } else {
            cfg.training.eval_every
        };
        Ok(Self {
            traces: active.iter().map(|&c| EpsilonTrace::new(c)).collect(),
            cfg,
            train,
            test,
            partition,
            clients,
            active,
            bank,
            ledger,
            sampler,
            eval_every,
            round: 0,
            status: RunStatus::Running,
            log: Vec::new(),
            accuracy_history: Vec::new(),
            round_seconds: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn status(&self) -> &RunStatus {
        &self.status
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn head_bank(&self) -> &HeadBank {
        &self.bank
    }

    pub fn ledger(&self) -> &RewardLedger {
        &self.ledger
    }

    pub fn traces(&self) -> &[EpsilonTrace] {
        &self.traces
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn partition(&self) -> &VerticalPartition {
        &self.partition
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn accuracy_history(&self) -> &[(usize, f64)] {
        &self.accuracy_history
    }

    pub fn rounds_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    /// Class predictions from clean activations of the clients the heads
    /// currently serve.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let parts = self.partition.split_features(features);
        let serving = self.bank.clients();
        let embeddings = serving
            .par_iter()
            .map(|&c| self.clients[c].embed(&parts[c]))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = embeddings.iter().collect();
        let logits = self.bank.global_head().predict(&Matrix::hconcat(&refs)?)?;
        Ok(logits.argmax_rows())
    }

    pub fn evaluate_accuracy(&self, ds: &Dataset) -> Result<f64> {
        let mut predictions = Vec::with_capacity(ds.len());
        for start in (0..ds.len()).step_by(PREDICT_CHUNK) {
            let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(ds.len())).collect();
            predictions.extend(self.predict(&ds.features.select_rows(&idx))?);
        }
        accuracy(&predictions, &ds.labels)
    }

    pub fn test_accuracy(&self) -> Result<f64> {
        self.evaluate_accuracy(&self.test)
    }

    /// Activations of `client` for arbitrary rows of its own columns, as it
    /// would transmit them now (noised in opus mode). Used by attack proxies.
    pub fn transmitted_activations(&self, client: usize, features: &Matrix, stream: &str) -> Result<Matrix> {
        let own = features.select_columns(self.partition.columns(client));
        let noisy = self.cfg.training.mode == Mode::Opus;
        let release = self.clients[client].release(&own, noisy, self.cfg.training.seed, stream, self.round, false)?;
        Ok(release.activation.values)
    }

    pub fn run_round(&mut self, observer: &mut dyn RoundObserver) -> Result<RoundState> {
        if self.status != RunStatus::Running {
            return Err(Error::InvalidArgument(format!(
                "run is no longer running: {:?}",
                self.status
            )));
        }
        self.round += 1;
        let t = self.round;
        let seed = self.cfg.training.seed;
        let opus = self.cfg.training.mode == Mode::Opus;
        let accounted = opus && self.ledger.is_accounted(t);

        // (a)
        let train_idx = self.sampler.next_indices();
        let train_batch = Batch::assemble(&self.train, &self.partition, &train_idx);
        let eval_batch = accounted.then(|| {
            let idx = draw_eval_indices(seed, t, self.train.len(), self.cfg.training.eval_batch, &train_idx);
            Batch::assemble(&self.train, &self.partition, &idx)
        });

        // (b) + (c)
        let clients = &self.clients;
        let releases = self
            .active
            .par_iter()
            .map(|&c| -> Result<(Release, Option<Release>)> {
                let train = clients[c].release(&train_batch.per_client_features[c], opus, seed, "dp-noise", t, true)?;
                let eval = match &eval_batch {
                    Some(b) => {
                        Some(clients[c].release(&b.per_client_features[c], opus, seed, "dp-noise-eval", t, false)?)
                    }
                    None => None,
                };
                Ok((train, eval))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut train_acts = Vec::with_capacity(releases.len());
        let mut tapes = Vec::with_capacity(releases.len());
        let mut eval_releases = Vec::with_capacity(releases.len());
        for (train, eval) in releases {
            let c = train.activation.client;
            if let Some(noise) = &train.noise {
                self.clients[c].record_snr(train.signal_energy, noise.noise().sum_squares());
            }
            observer.on_upload(&Upload {
                round: t,
                kind: BatchKind::Train,
                origin: c,
                sample_indices: &train_idx,
                activation: &train.activation,
            });
            if let (Some(e), Some(b)) = (&eval, &eval_batch) {
                observer.on_upload(&Upload {
                    round: t,
                    kind: BatchKind::Eval,
                    origin: c,
                    sample_indices: &b.sample_indices,
                    activation: &e.activation,
                });
            }
            tapes.push(train.tape.expect("training release keeps its tape"));
            train_acts.push(train.activation);
            eval_releases.extend(eval);
        }

        // (d)
        let step = self
            .bank
            .train_heads(&train_acts, &train_batch.labels, self.cfg.model.server_lr)?;

        // (e)
        for (k, &c) in self.active.iter().enumerate() {
            observer.on_gradient(&GradientMessage {
                round: t,
                recipient: c,
                origin: c,
                sample_indices: &train_idx,
                gradient: &step.input_grads[k],
            });
        }

        // (f)
        let lr = self.cfg.model.client_lr;
        let mut work: Vec<Option<(crate::nn::ForwardTape, Matrix)>> = (0..self.clients.len()).map(|_| None).collect();
        for ((&c, tape), g) in self.active.iter().zip(tapes).zip(step.input_grads) {
            work[c] = Some((tape, g));
        }
        self.clients
            .par_iter_mut()
            .zip(work.into_par_iter())
            .try_for_each(|(client, w)| match w {
                Some((tape, g)) => client.apply_gradient(tape, &g, lr),
                None => Ok(()),
            })?;

        // (g)
        let mut state = RoundState {
            round: t,
            train_loss: step.loss_all,
            contribution: None,
            ledger_rows: Vec::new(),
            dropped: Vec::new(),
            test_accuracy: None,
        };
        let mut issued = None;
        if let Some(eval_batch) = &eval_batch {
            let (report, rows, tokens) = self.account(t, eval_batch, eval_releases)?;
            issued = Some(tokens);
            state.contribution = Some(report);
            state.ledger_rows = rows;
            let outcome = apply_dropout(&mut self.ledger, t);
            if !outcome.dropped.is_empty() {
                self.active.retain(|c| !outcome.dropped.contains(c));
                if outcome.is_terminal() {
                    self.status = RunStatus::InsufficientClients {
                        round: t,
                        dropped: outcome.dropped.clone(),
                        remaining: outcome.remaining,
                    };
                } else {
                    self.bank = self.bank.without(&outcome.dropped)?;
                }
            }
            state.dropped = outcome.dropped;
            // Refresh active flags after the dropout decision.
            state.ledger_rows = self.ledger.rows_for_round(t).cloned().collect();
        }

        if t >= self.cfg.training.rounds && self.status == RunStatus::Running {
            self.status = RunStatus::Completed;
        }
        if t.is_multiple_of(self.eval_every) || self.status != RunStatus::Running {
            let acc = self.test_accuracy()?;
            self.accuracy_history.push((t, acc));
            state.test_accuracy = Some(acc);
        }

        // (h)
        for row in &state.ledger_rows {
            self.log.push(LogRow {
                round: t,
                client_id: row.client as i64,
                importance: Some(row.importance),
                s: Some(row.s),
                p: Some(row.p),
                r: Some(row.r),
                tau: Some(row.tokens),
                cost: Some(row.cost),
                utility: Some(row.utility),
                epsilon: Some(row.epsilon),
                g: Some(row.g),
                active: usize::from(row.active),
                loss_n: state.contribution.as_ref().map(|r| r.loss_all),
                test_acc: None,
            });
        }
        self.log.push(LogRow {
            round: t,
            client_id: -1,
            tau: issued,
            active: self.active.len(),
            loss_n: Some(step.loss_all),
            test_acc: state.test_accuracy,
            ..Default::default()
        });
        Ok(state)
    }

    /// Scoring, rewards, tokens, utility and ε adaptation for one round.
    fn account(
        &mut self,
        t: usize,
        eval_batch: &Batch,
        eval_releases: Vec<Release>,
    ) -> Result<(ContributionReport, Vec<LedgerRow>, f64)> {
        let eval_labels = &eval_batch.labels;
        let (acts, records): (Vec<ActivationBatch>, Vec<_>) =
            eval_releases.into_iter().map(|r| (r.activation, r.noise)).unzip();
        let report = self.bank.compute_importance(t, &acts, eval_labels)?;
        let (loss_all, grads) = self.bank.global_loss_with_input_grads(&acts, eval_labels)?;

        let rewards: Vec<_> = report
            .clients
            .iter()
            .map(|cc| {
                let client = &self.clients[cc.client];
                reward(cc.importance, client.economics(), client.budget())
            })
            .collect();
        self.ledger.pool.begin_round();
        let pairs: Vec<(usize, f64)> = report
            .clients
            .iter()
            .zip(&rewards)
            .map(|(c, r)| (c.client, r.r))
            .collect();
        let dist = distribute_tokens(&mut self.ledger.pool, &pairs)?;

        let mut rows = Vec::with_capacity(pairs.len());
        for (k, cc) in report.clients.iter().enumerate() {
            let c = cc.client;
            let record = records[k].as_ref().ok_or(Error::MissingNoiseRecord(c))?;
            let client = &mut self.clients[c];
            let econ = client.economics().clone();
            let gs = gs_h_from_parts(loss_all, cc.loss_without, &grads[k], &econ)?;
            let dh = noise_grad_epsilon(record, client.budget())?;
            let g = grad_contribution(&gs, &dh, &econ, client.budget())?;
            let step = update_epsilon(client.budget_mut(), g, t);
            if let Some(trace) = self.traces.iter_mut().find(|tr| tr.client == c) {
                trace.push(step);
            }
            let tokens = dist.tokens(k);
            rows.push(LedgerRow {
                round: t,
                client: c,
                importance: cc.importance,
                s: rewards[k].s,
                p: rewards[k].p,
                r: rewards[k].r,
                floored: rewards[k].floored,
                tokens,
                cost: econ.cost,
                utility: utility(tokens, econ.cost),
                epsilon: step.before,
                g,
                active: true,
            });
        }
        self.ledger.record(rows.clone())?;
        Ok((report, rows, to_tokens(dist.issued())))
    }

    /// Run until `T` rounds are done or the run terminates early.
    pub fn run(&mut self, observer: &mut dyn RoundObserver) -> Result<()> {
        while self.status == RunStatus::Running {
            let start = Instant::now();
            self.run_round(observer)?;
            self.round_seconds.push(start.elapsed().as_secs_f64());
        }
        Ok(())
    }

    pub fn mean_round_seconds(&self) -> f64 {
        if self.round_seconds.is_empty() {
            0.0
        } else {
            self.round_seconds.iter().sum::<f64>() / self.round_seconds.len() as f64
        }
    }

    /// Per-client SNR in dB over all training releases; `None` without noise.
    pub fn snr_db(&self, client: usize) -> Option<f64> {
        let (signal, noise) = self.clients[client].snr_energy();
        snr_db_from_energy(signal, noise).ok()
    }

    pub fn dropouts(&self) -> &[DropoutEvent] {
        self.ledger.dropouts()
    }
}

/// Build a thread pool honoring `threads` (0 = rayon default) and run `f`
/// inside it.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
