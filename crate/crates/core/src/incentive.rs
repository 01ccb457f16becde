//! Rewards, token distribution and dropout economics.
//!
//! Rewards follow `S = I · C^{1/a}`, `P = Δf / ε`, `R = αS + βP`. Each
//! accounted round the server splits an allotment of `N(N+1)/2` tokens in
//! proportion to `R`, deducts it from the pool, then hands out at most one
//! extra token per client in ascending id order while the pool lasts.
//!
//! Token amounts are held as integer micro-tokens so that the pool's
//! accounting identity `supplied = issued + expired + remaining` is exact.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dp::PrivacyBudget;
use crate::error::{Error, Result};

/// Micro-tokens per token.
pub const MICRO: u64 = 1_000_000;

pub fn to_tokens(micro: u64) -> f64 {
    micro as f64 / MICRO as f64
}

pub fn to_micro(tokens: f64) -> Result<u64> {
    if !(tokens >= 0.0) || !tokens.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "token amount must be finite and non-negative, got {tokens}"
        )));
    }
    Ok((tokens * MICRO as f64).round() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEconomics {
    /// `C`, the share of resources the client commits.
    pub resource_fraction: f64,
    /// `B`, tokens the client spends per round to participate.
    pub cost: f64,
    /// `a`
    pub equity_exponent: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ClientEconomics {
    fn default() -> Self {
        Self {
            resource_fraction: 1.0,
            cost: 1.0,
            equity_exponent: 2.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl ClientEconomics {
    /// `C^{1/a}`
    pub fn resource_weight(&self) -> f64 {
        self.resource_fraction.powf(1.0 / self.equity_exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub s: f64,
    pub p: f64,
    pub r: f64,
    /// True when a negative importance was raised to zero for this reward.
    pub floored: bool,
}

/// `(S, P, R)` for one client and round.
pub fn reward(importance: f64, econ: &ClientEconomics, budget: &PrivacyBudget) -> Reward {
    let floored = importance < 0.0;
    let s = importance.max(0.0) * econ.resource_weight();
    let p = budget.sensitivity() / budget.epsilon();
    Reward {
        s,
        p,
        r: econ.alpha * s + econ.beta * p,
        floored,
    }
}

/// `U = τ − B`
pub fn utility(tokens: f64, cost: f64) -> f64 {
    tokens - cost
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetScope {
    /// The pool is refilled to the configured supply at every accounted round.
    PerRound,
    /// One supply for the whole run.
    Total,
}

impl std::str::FromStr for BudgetScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_round" => Ok(Self::PerRound),
            "total" => Ok(Self::Total),
            other => Err(Error::Config(format!(
                "budget_scope must be \"per_round\" or \"total\", got {other:?}"
            ))),
        }
    }
}

/// The server's token supply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPool {
    scope: BudgetScope,
    supply: u64,
    remaining: u64,
    supplied: u64,
    issued: u64,
    expired: u64,
}

impl TokenPool {
    pub fn new(scope: BudgetScope, supply_tokens: f64) -> Result<Self> {
        let supply = to_micro(supply_tokens)?;
        let (remaining, supplied) = match scope {
            BudgetScope::Total => (supply, supply),
            BudgetScope::PerRound => (0, 0),
        };
        Ok(Self {
            scope,
            supply,
            remaining,
            supplied,
            issued: 0,
            expired: 0,
        })
    }

    pub fn scope(&self) -> BudgetScope {
        self.scope
    }

    /// Micro-tokens left for the current round.
    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    pub fn supplied(&self) -> u64 {
        self.supplied
    }

    pub fn expired(&self) -> u64 {
        self.expired
    }

    /// `supplied == issued + expired + remaining`
    pub fn is_balanced(&self) -> bool {
        self.supplied == self.issued + self.expired + self.remaining
    }

    /// Called once before each accounted round. A per-round pool discards
    /// what was left and refills.
    pub fn begin_round(&mut self) {
        if self.scope == BudgetScope::PerRound {
            self.expired += self.remaining;
            self.remaining = self.supply;
            self.supplied += self.supply;
        }
    }

    fn take(&mut self, amount: u64) {
        debug_assert!(amount <= self.remaining);
        self.remaining -= amount;
        self.issued += amount;
    }
}

/// Result of one call to [`distribute_tokens`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub clients: Vec<usize>,
    /// Formula share in micro-tokens (after scaling, if any).
    pub share: Vec<u64>,
    /// Round-robin extra in micro-tokens.
    pub extra: Vec<u64>,
    /// `N(N+1)/2` in micro-tokens.
    pub allotment: u64,
    /// The pool could not cover the allotment and shares were scaled down.
    pub scaled: bool,
    /// All rewards were zero and the allotment was split evenly.
    pub equal_split: bool,
    /// Pool content after the round.
    pub remaining_after: u64,
}

impl Distribution {
    pub fn total(&self, k: usize) -> u64 {
        self.share[k] + self.extra[k]
    }

    pub fn tokens(&self, k: usize) -> f64 {
        to_tokens(self.total(k))
    }

    pub fn issued(&self) -> u64 {
        self.share.iter().chain(&self.extra).sum()
    }
}

/// Split `target` integer units in proportion to `weights` by largest
/// remainder; ties go to the lower index. The parts sum to `target` exactly.
pub fn proportional_split(weights: &[f64], target: u64) -> Vec<u64> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * target as f64).collect();
    let mut parts: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    // Float rounding can push the floors one unit past the target.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    if assigned > target {
        order.sort_by(|&a, &b| {
            (exact[a] - exact[a].floor())
                .total_cmp(&(exact[b] - exact[b].floor()))
                .then(b.cmp(&a))
        });
        let mut excess = assigned - target;
        for &k in order.iter().cycle() {
            if excess == 0 {
                break;
            }
            if parts[k] > 0 {
                parts[k] -= 1;
                excess -= 1;
            }
        }
    } else {
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let mut short = target - assigned;
        for &k in order.iter().cycle() {
            if short == 0 {
                break;
            }
            parts[k] += 1;
            short -= 1;
        }
    }
    parts
}

/// Token distribution for one accounted round.
///
/// `rewards` pairs client id with `R`, in ascending id order. The allotment
/// uses the number of clients passed in. Call [`TokenPool::begin_round`]
/// first.
pub fn distribute_tokens(pool: &mut TokenPool, rewards: &[(usize, f64)]) -> Result<Distribution> {
    let n = rewards.len() as u64;
    if n == 0 {
        return Err(Error::InvalidArgument("no clients to reward".into()));
    }
    if rewards.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::InvalidArgument(
            "reward clients must be in ascending id order".into(),
        ));
    }
    if let Some(&(c, r)) = rewards.iter().find(|(_, r)| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "reward of client {c} must be finite and non-negative, got {r}"
        )));
    }
    let allotment = n * (n + 1) / 2 * MICRO;
    let total: f64 = rewards.iter().map(|(_, r)| r).sum();
    let equal_split = total <= 0.0;
    let weights: Vec<f64> = if equal_split {
        vec![1.0; rewards.len()]
    } else {
        rewards.iter().map(|(_, r)| *r).collect()
    };

    let scaled = allotment > pool.remaining;
    let target = allotment.min(pool.remaining);
    let share = proportional_split(&weights, target);
    pool.take(target);

    let mut extra = vec![0; rewards.len()];
    for e in extra.iter_mut() {
        if pool.remaining == 0 {
            break;
        }
        let grant = MICRO.min(pool.remaining);
        pool.take(grant);
        *e = grant;
    }

    Ok(Distribution {
        clients: rewards.iter().map(|(c, _)| *c).collect(),
        share,
        extra,
        allotment,
        scaled,
        equal_split,
        remaining_after: pool.remaining,
    })
}

/// One client's accounting for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub round: usize,
    pub client: usize,
    pub importance: f64,
    pub s: f64,
    pub p: f64,
    pub r: f64,
    pub floored: bool,
    pub tokens: f64,
    pub cost: f64,
    pub utility: f64,
    /// ε used for this round's release.
    pub epsilon: f64,
    pub g: f64,
    /// Status after this round's dropout decision.
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutEvent {
    pub round: usize,
    pub client: usize,
    pub utility: f64,
    pub tokens: f64,
}

/// Outcome of [`apply_dropout`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DropOutcome {
    pub dropped: Vec<usize>,
    pub remaining: usize,
}

impl DropOutcome {
    /// Fewer than two clients are left; the run cannot continue.
    pub fn is_terminal(&self) -> bool {
        self.remaining < 2
    }
}

/// Per-round incentive records and the active set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardLedger {
    pub warmup: usize,
    pub rounds: usize,
    pub pool: TokenPool,
    active: BTreeSet<usize>,
    rows: Vec<LedgerRow>,
    dropouts: Vec<DropoutEvent>,
    floor_events: usize,
}

impl RewardLedger {
    pub fn new(clients: &[usize], warmup: usize, rounds: usize, pool: TokenPool) -> Self {
        Self {
            warmup,
            rounds,
            pool,
            active: clients.iter().copied().collect(),
            rows: Vec::new(),
            dropouts: Vec::new(),
            floor_events: 0,
        }
    }

    pub fn active(&self) -> Vec<usize> {
        self.active.iter().copied().collect()
    }

    pub fn is_active(&self, client: usize) -> bool {
        self.active.contains(&client)
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn dropouts(&self) -> &[DropoutEvent] {
        &self.dropouts
    }

    /// Number of rewards computed from a floored negative importance.
    pub fn floor_events(&self) -> usize {
        self.floor_events
    }

    /// Whether round `round` (1-based) is past warm-up.
    pub fn is_accounted(&self, round: usize) -> bool {
        round > self.warmup
    }

    /// Append a round's rows. Rows for inactive clients are rejected.
    pub fn record(&mut self, rows: Vec<LedgerRow>) -> Result<()> {
        if let Some(row) = rows.iter().find(|r| !self.active.contains(&r.client)) {
            return Err(Error::InactiveClient(row.client));
        }
        self.floor_events += rows.iter().filter(|r| r.floored).count();
        self.rows.extend(rows);
        Ok(())
    }

    pub fn rows_for_round(&self, round: usize) -> impl Iterator<Item = &LedgerRow> {
        self.rows.iter().filter(move |r| r.round == round)
    }
}

/// Drop every client whose utility this round is negative, and every client
/// that received nothing once the pool is empty. Does nothing during warm-up.
///
/// The dropped clients are marked inactive even if fewer than two remain;
/// the caller checks [`DropOutcome::is_terminal`].
pub fn apply_dropout(ledger: &mut RewardLedger, round: usize) -> DropOutcome {
    if !ledger.is_accounted(round) {
        return DropOutcome {
            dropped: Vec::new(),
            remaining: ledger.active.len(),
        };
    }
    let exhausted = ledger.pool.remaining() == 0;
    let mut dropped = Vec::new();
    for row in ledger.rows.iter_mut().filter(|r| r.round == round) {
        if row.utility < 0.0 || (exhausted && row.tokens == 0.0) {
            row.active = false;
            dropped.push(row.client);
            ledger.dropouts.push(DropoutEvent {
                round,
                client: row.client,
                utility: row.utility,
                tokens: row.tokens,
            });
        }
    }
    for c in &dropped {
        ledger.active.remove(c);
    }
    DropOutcome {
        dropped,
        remaining: ledger.active.len(),
    }
}
