//! One configured run end to end: data, optional poisoning, training,
//! attack proxies and the summary.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    eval_asr, feature_inference_proxy, label_inference_proxy, poison_dataset, AttackReport, BackdoorSpec,
    DecoderSettings, GradientCollector,
};
use crate::config::{ExperimentConfig, Mode};
use crate::error::Result;
use crate::incentive::{to_tokens, DropoutEvent};
use crate::log::{LogRow, CSV_SCHEMA_VERSION};
use crate::messages::{NoObserver, RoundObserver};
use crate::orchestrator::{prepare_data, with_threads, RunStatus, Simulation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: usize,
    pub active: bool,
    pub accounted_rounds: usize,
    /// Sum of the client's `tau` column.
    pub total_tokens: f64,
    /// Mean of the client's `I` column.
    pub mean_importance: f64,
    /// ε after the last update.
    pub final_epsilon: f64,
    /// Signal-to-noise ratio of all training releases; absent without noise.
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSummary {
    pub supplied: f64,
    pub issued: f64,
    pub expired: f64,
    pub remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub csv_schema_version: u32,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub rounds_completed: usize,
    pub rounds_per_epoch: usize,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub accuracy_history: Vec<(usize, f64)>,
    pub clients: Vec<ClientSummary>,
    pub dropouts: Vec<DropoutEvent>,
    /// Rewards computed after raising a negative importance to zero.
    pub floored_rewards: usize,
    pub tokens: TokenSummary,
    pub attack: Option<AttackReport>,
    pub mean_round_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub log: Vec<LogRow>,
}

impl RunOutput {
    pub fn csv(&self) -> String {
        crate::log::to_csv(&self.log)
    }
}

/// Run `cfg` on a thread pool of `cfg.training.threads` workers.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    with_threads(cfg.training.threads, || run_in_current_pool(cfg))?
}

fn run_in_current_pool(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let mut data = prepare_data(cfg)?;
    let seed = cfg.training.seed;
    let backdoor = match &cfg.attack.backdoor {
        Some(b) => {
            let spec = BackdoorSpec::from_config(b, &data.partition)?;
            let (poisoned, _) = poison_dataset(&data.train, &data.partition, &spec, seed)?;
            data.train = poisoned;
            Some(spec)
        }
        None => None,
    };

    let mut sim = Simulation::new(cfg.clone(), data)?;
    let mut collector = cfg
        .attack
        .label_inference
        .as_ref()
        .map(|l| GradientCollector::new(l.attacker, l.samples));
    {
        let observer: &mut dyn RoundObserver = match collector.as_mut() {
            Some(c) => c,
            None => &mut NoObserver,
        };
        sim.run(observer)?;
    }

    let final_test_accuracy = sim
        .accuracy_history()
        .last()
        .map(|&(_, a)| a)
        .unwrap_or(sim.test_accuracy()?);
    let final_train_accuracy = sim.evaluate_accuracy(sim.train_set())?;

    let attack = if cfg.attack.is_empty() {
        None
    } else {
        let asr = match &backdoor {
            Some(spec) => Some(eval_asr(|x| sim.predict(x), spec, sim.test_set())?),
            None => None,
        };
        let label_acc = match (&collector, &cfg.attack.label_inference) {
            (Some(c), Some(l)) => {
                let (grads, idx) = c.matrix()?;
                let labels: Vec<usize> = idx.iter().map(|&i| sim.train_set().labels[i]).collect();
                Some(label_inference_proxy(
                    &grads,
                    &labels,
                    sim.train_set().num_classes,
                    l.iterations,
                    seed,
                )?)
            }
            _ => None,
        };
        let feature = match &cfg.attack.feature_inference {
            Some(f) => {
                let train = sim.train_set();
                let aux: Vec<usize> = (0..f.aux_samples.min(train.len())).collect();
                let eval: Vec<usize> = (aux.len()..(aux.len() + f.eval_samples).min(train.len())).collect();
                let cols = sim.partition().columns(f.victim).to_vec();
                let xa = train.features.select_rows(&aux);
                let xe = train.features.select_rows(&eval);
                let ha = sim.transmitted_activations(f.victim, &xa, "attack-aux")?;
                let he = sim.transmitted_activations(f.victim, &xe, "attack-eval")?;
                let settings = DecoderSettings {
                    hidden: f.hidden.clone(),
                    epochs: f.epochs,
                    lr: f.lr,
                    batch_size: 64,
                    seed,
                };
                Some(feature_inference_proxy(
                    &ha,
                    &xa.select_columns(&cols),
                    &he,
                    &xe.select_columns(&cols),
                    &settings,
                )?)
            }
            None => None,
        };
        Some(AttackReport {
            mode: cfg.training.mode,
            clean_accuracy: final_test_accuracy,
            poison_fraction: backdoor.as_ref().map(|s| s.poison_fraction),
            asr,
            label_inference_proxy_accuracy: label_acc,
            feature_inference_proxy: feature,
        })
    };

    let log = sim.log().to_vec();
    let clients = sim
        .clients()
        .iter()
        .map(|c| {
            let id = c.id();
            let rows: Vec<&LogRow> = log.iter().filter(|r| r.client_id == id as i64).collect();
            let n = rows.len();
            ClientSummary {
                client: id,
                active: sim.active().contains(&id),
                accounted_rounds: n,
                total_tokens: rows.iter().filter_map(|r| r.tau).sum(),
                mean_importance: if n == 0 {
                    0.0
                } else {
                    rows.iter().filter_map(|r| r.importance).sum::<f64>() / n as f64
                },
                final_epsilon: c.budget().epsilon(),
                snr_db: if cfg.training.mode == Mode::Opus {
                    sim.snr_db(id)
                } else {
                    None
                },
            }
        })
        .collect();
    let pool = &sim.ledger().pool;
    let summary = RunSummary {
        csv_schema_version: CSV_SCHEMA_VERSION,
        config: cfg.clone(),
        status: sim.status().clone(),
        rounds_completed: sim.round(),
        rounds_per_epoch: sim.rounds_per_epoch(),
        final_train_accuracy,
        final_test_accuracy,
        accuracy_history: sim.accuracy_history().to_vec(),
        clients,
        dropouts: sim.dropouts().to_vec(),
        floored_rewards: sim.ledger().floor_events(),
        tokens: TokenSummary {
            supplied: to_tokens(pool.supplied()),
            issued: to_tokens(pool.issued()),
            expired: to_tokens(pool.expired()),
            remaining: to_tokens(pool.remaining()),
        },
        attack,
        mean_round_seconds: sim.mean_round_seconds(),
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { summary, log })
}
