//! Experiment configuration in TOML.
//!
//! Every section is optional and every key has a default, so an empty file
//! is the default MNIST experiment. Unknown keys, type mismatches and
//! duplicate keys are errors. Values outside the published design bounds
//! produce warnings, or errors under `--strict`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PartitionScheme;
use crate::dp::PrivacyBudget;
use crate::error::{Error, Result};
use crate::incentive::{BudgetScope, ClientEconomics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Noised activations, contribution scoring, rewards and dropout.
    Opus,
    /// Plain split training without noise or incentives.
    Vanilla,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opus" => Ok(Self::Opus),
            "vanilla" => Ok(Self::Vanilla),
            other => Err(Error::Config(format!("mode must be opus or vanilla, got {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Opus => "opus",
            Self::Vanilla => "vanilla",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// IDX files in `path`.
    Mnist,
    /// Generated by `synthetic_dataset`.
    Synthetic,
    /// `path` holds `train.csv` and `test.csv`.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: PathBuf,
    /// Use only the first `train_limit` training samples (0 = all).
    pub train_limit: usize,
    /// Use only the first `test_limit` test samples (0 = all).
    pub test_limit: usize,
    /// Synthetic: training samples.
    pub samples: usize,
    /// Synthetic: test samples.
    pub test_samples: usize,
    /// Synthetic: feature columns.
    pub features: usize,
    /// Synthetic and CSV: number of classes.
    pub classes: usize,
    /// Synthetic: the first `informative` columns drive the labels.
    pub informative: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Mnist,
            path: PathBuf::from("data/mnist"),
            train_limit: 0,
            test_limit: 0,
            samples: 2000,
            test_samples: 1000,
            features: 20,
            classes: 4,
            informative: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// `N`
    pub clients: usize,
    pub scheme: SchemeName,
    /// Column lists for `scheme = "explicit"`.
    pub columns: Vec<Vec<usize>>,
    /// Add one more client holding a copy of this client's columns, with
    /// identically initialized bottom model.
    pub twin_of: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Contiguous,
    Strided,
    Explicit,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            scheme: SchemeName::Strided,
            columns: Vec::new(),
            twin_of: None,
        }
    }
}

impl PartitionConfig {
    pub fn scheme(&self) -> PartitionScheme {
        match self.scheme {
            SchemeName::Contiguous => PartitionScheme::Contiguous,
            SchemeName::Strided => PartitionScheme::Strided,
            SchemeName::Explicit => PartitionScheme::Explicit(self.columns.clone()),
        }
    }

    /// Number of clients including the twin, if any.
    pub fn total_clients(&self) -> usize {
        self.clients + usize::from(self.twin_of.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of each client's bottom model.
    pub client_hidden: Vec<usize>,
    /// Width of each client's embedding.
    pub embedding: usize,
    /// Hidden widths of the server heads (empty = one affine layer).
    pub server_hidden: Vec<usize>,
    pub client_lr: f64,
    pub server_lr: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            client_hidden: vec![128],
            embedding: 16,
            server_hidden: Vec::new(),
            client_lr: 0.01,
            server_lr: 0.05,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub seed: u64,
    /// `T`; one round is one mini-batch step.
    pub rounds: usize,
    /// `W`; no scoring, rewards or dropout in rounds `1..=W`.
    pub warmup: usize,
    /// Size of the held-out batch used for contribution scoring.
    pub eval_batch: usize,
    /// Test accuracy every this many rounds (0 = once per epoch).
    pub eval_every: usize,
    /// Worker threads (0 = rayon default).
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Opus,
            seed: 1,
            rounds: 3780,
            warmup: 630,
            eval_batch: 128,
            eval_every: 0,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    /// Initial ε for every client.
    pub epsilon: f64,
    /// Optional per-client initial ε; overrides `epsilon` when non-empty.
    pub client_epsilon: Vec<f64>,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub delta: f64,
    /// `Δf`
    pub sensitivity: f64,
    /// `η`
    pub step_size: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            client_epsilon: Vec::new(),
            epsilon_min: 0.5,
            epsilon_max: 5.0,
            delta: 0.01,
            sensitivity: 0.5,
            step_size: 0.05,
        }
    }
}

impl PrivacyConfig {
    pub fn budget_for(&self, client: usize) -> Result<PrivacyBudget> {
        let eps = self.client_epsilon.get(client).copied().unwrap_or(self.epsilon);
        PrivacyBudget::new(
            eps,
            (self.epsilon_min, self.epsilon_max),
            self.delta,
            self.sensitivity,
            self.step_size,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncentiveConfig {
    pub alpha: f64,
    pub beta: f64,
    /// `a`
    pub equity_exponent: f64,
    /// `C` for every client.
    pub resource_fraction: f64,
    /// Optional per-client `C`; overrides `resource_fraction` when non-empty.
    pub client_resource_fraction: Vec<f64>,
    /// `B`
    pub cost: f64,
    /// `τ_ar`
    pub budget: f64,
    pub budget_scope: BudgetScope,
}

impl Default for IncentiveConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            equity_exponent: 2.0,
            resource_fraction: 1.0,
            client_resource_fraction: Vec::new(),
            cost: 1.0,
            budget: 500.0,
            budget_scope: BudgetScope::PerRound,
        }
    }
}

impl IncentiveConfig {
    pub fn economics_for(&self, client: usize) -> ClientEconomics {
        ClientEconomics {
            resource_fraction: self
                .client_resource_fraction
                .get(client)
                .copied()
                .unwrap_or(self.resource_fraction),
            cost: self.cost,
            equity_exponent: self.equity_exponent,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackdoorConfig {
    pub attacker: usize,
    /// `pd`, fraction of training samples poisoned.
    pub poison_fraction: f64,
    pub target: usize,
    /// Offset of the trigger band inside the attacker's columns.
    pub trigger_offset: usize,
    pub trigger_width: usize,
}

impl Default for BackdoorConfig {
    fn default() -> Self {
        Self {
            attacker: 0,
            poison_fraction: 0.1,
            target: 0,
            trigger_offset: 60,
            trigger_width: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelInferenceConfig {
    /// Client whose received gradients are clustered.
    pub attacker: usize,
    /// Gradient rows collected (most recent rounds).
    pub samples: usize,
    pub iterations: usize,
}

impl Default for LabelInferenceConfig {
    fn default() -> Self {
        Self {
            attacker: 0,
            samples: 2000,
            iterations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureInferenceConfig {
    pub victim: usize,
    /// Auxiliary samples with known features; must be at least 500.
    pub aux_samples: usize,
    pub eval_samples: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FeatureInferenceConfig {
    fn default() -> Self {
        Self {
            victim: 1,
            aux_samples: 1000,
            eval_samples: 1000,
            hidden: vec![64],
            epochs: 30,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub backdoor: Option<BackdoorConfig>,
    pub label_inference: Option<LabelInferenceConfig>,
    pub feature_inference: Option<FeatureInferenceConfig>,
    /// Poisoning fractions for the `attack` subcommand.
    pub pd_list: Vec<f64>,
}

impl AttackConfig {
    pub fn is_empty(&self) -> bool {
        self.backdoor.is_none() && self.label_inference.is_none() && self.feature_inference.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub privacy: PrivacyConfig,
    pub incentive: IncentiveConfig,
    pub attack: AttackConfig,
}

/// A bound check that did not hold.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundViolation {
    pub key: &'static str,
    pub value: f64,
    pub bound: String,
    /// Violations that stay warnings even under strict checking.
    pub advisory: bool,
}

impl fmt::Display for BoundViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} = {} is outside the design bound {}",
            self.key, self.value, self.bound
        )
    }
}

fn check_range(out: &mut Vec<BoundViolation>, key: &'static str, value: f64, lo: f64, hi: f64, advisory: bool) {
    if !(lo..=hi).contains(&value) {
        out.push(BoundViolation {
            key,
            value,
            bound: if hi.is_infinite() {
                format!(">= {lo}")
            } else {
                format!("[{lo}, {hi}]")
            },
            advisory,
        });
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Values outside the published design bounds. Bounds on `α`, `β` and
    /// `B` are advisory; the default `B = 1` sits far below its bound.
    pub fn bound_violations(&self) -> Vec<BoundViolation> {
        let mut v = Vec::new();
        let p = &self.privacy;
        check_range(&mut v, "privacy.epsilon_min", p.epsilon_min, 0.5, 5.0, false);
        check_range(&mut v, "privacy.epsilon_max", p.epsilon_max, 0.5, 5.0, false);
        check_range(&mut v, "privacy.epsilon", p.epsilon, 0.5, 5.0, false);
        for &e in &p.client_epsilon {
            check_range(&mut v, "privacy.client_epsilon", e, 0.5, 5.0, false);
        }
        check_range(&mut v, "privacy.sensitivity", p.sensitivity, 0.01, 1.0, false);
        let i = &self.incentive;
        check_range(&mut v, "incentive.equity_exponent", i.equity_exponent, 2.0, 5.0, false);
        check_range(&mut v, "incentive.budget", i.budget, 10.0, f64::INFINITY, false);
        check_range(
            &mut v,
            "partition.clients",
            self.partition.total_clients() as f64,
            2.0,
            25.0,
            false,
        );
        check_range(
            &mut v,
            "incentive.resource_fraction",
            i.resource_fraction,
            0.01,
            1.0,
            false,
        );
        for &c in &i.client_resource_fraction {
            check_range(&mut v, "incentive.client_resource_fraction", c, 0.01, 1.0, false);
        }
        check_range(&mut v, "incentive.alpha", i.alpha, 0.1, 1.0, true);
        check_range(&mut v, "incentive.beta", i.beta, 0.1, 1.0, true);
        check_range(&mut v, "incentive.cost", i.cost, 50.0, f64::INFINITY, true);
        v
    }

    /// Structural checks that always fail, independent of strictness.
    pub fn check_structure(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.training;
        if t.rounds == 0 {
            return bad("training.rounds must be > 0".into());
        }
        if t.warmup >= t.rounds {
            return bad(format!(
                "training.warmup ({}) must be < training.rounds ({})",
                t.warmup, t.rounds
            ));
        }
        if self.partition.clients < 2 {
            return bad(format!(
                "partition.clients must be >= 2, got {}",
                self.partition.clients
            ));
        }
        if let Some(k) = self.partition.twin_of {
            if k >= self.partition.clients {
                return bad(format!("partition.twin_of = {k} is not a client"));
            }
        }
        let n = self.partition.total_clients();
        if !self.privacy.client_epsilon.is_empty() && self.privacy.client_epsilon.len() != n {
            return bad(format!("privacy.client_epsilon needs {n} entries"));
        }
        if !self.incentive.client_resource_fraction.is_empty() && self.incentive.client_resource_fraction.len() != n {
            return bad(format!("incentive.client_resource_fraction needs {n} entries"));
        }
        let m = &self.model;
        if m.embedding == 0 || m.batch_size == 0 || m.client_hidden.contains(&0) || m.server_hidden.contains(&0) {
            return bad("model widths and batch_size must be positive".into());
        }
        for (k, lr) in [("model.client_lr", m.client_lr), ("model.server_lr", m.server_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{k} must be finite and >= 0, got {lr}"));
            }
        }
        if t.eval_batch == 0 {
            return bad("training.eval_batch must be > 0".into());
        }
        for c in 0..n {
            self.privacy.budget_for(c).map_err(|e| Error::Config(e.to_string()))?;
            let econ = self.incentive.economics_for(c);
            if !(econ.resource_fraction > 0.0) || !(econ.equity_exponent > 0.0) {
                return bad("resource fractions and equity_exponent must be positive".into());
            }
        }
        let i = &self.incentive;
        if !(i.alpha >= 0.0 && i.beta >= 0.0 && i.cost >= 0.0 && i.budget >= 0.0) {
            return bad("alpha, beta, cost and budget must be >= 0".into());
        }
        if let Some(b) = &self.attack.backdoor {
            if !(0.0..=1.0).contains(&b.poison_fraction) {
                return bad(format!(
                    "attack.backdoor.poison_fraction {} outside [0, 1]",
                    b.poison_fraction
                ));
            }
            if b.attacker >= n {
                return bad(format!("attack.backdoor.attacker {} is not a client", b.attacker));
            }
        }
        if let Some(f) = &self.attack.feature_inference {
            if f.aux_samples < 500 {
                return bad(format!(
                    "attack.feature_inference.aux_samples must be >= 500, got {}",
                    f.aux_samples
                ));
            }
            if f.victim >= n {
                return bad(format!("attack.feature_inference.victim {} is not a client", f.victim));
            }
        }
        if let Some(l) = &self.attack.label_inference {
            if l.attacker >= n {
                return bad(format!(
                    "attack.label_inference.attacker {} is not a client",
                    l.attacker
                ));
            }
        }
        Ok(())
    }

    /// Structural checks plus bound checks. Under `strict`, any
    /// non-advisory bound violation is an error; otherwise all violations
    /// come back as warnings.
    pub fn validate(&self, strict: bool) -> Result<Vec<String>> {
        self.check_structure()?;
        let mut warnings = Vec::new();
        for v in self.bound_violations() {
            if strict && !v.advisory {
                return Err(Error::Config(v.to_string()));
            }
            warnings.push(v.to_string());
        }
        Ok(warnings)
    }
}

/// Read, parse and validate a config file. Returns the config and any
/// bound warnings.
pub fn parse_config(path: &Path, strict: bool) -> Result<(ExperimentConfig, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = ExperimentConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let warnings = cfg.validate(strict)?;
    Ok((cfg, warnings))
}
