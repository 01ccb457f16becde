//! Mechanism properties, written once and driven both by `proptest!` and by
//! the acceptance runner.

use opus_vfl::dp::PrivacyBudget;
use opus_vfl::epsilon::update_epsilon;
use opus_vfl::incentive::{
    apply_dropout, distribute_tokens, utility, BudgetScope, LedgerRow, RewardLedger, TokenPool, MICRO,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

type Check = std::result::Result<(), TestCaseError>;

pub fn scope() -> impl Strategy<Value = BudgetScope> {
    prop_oneof![Just(BudgetScope::PerRound), Just(BudgetScope::Total)]
}

pub fn adversarial_g() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e12f64..1e12,
        -1.0f64..1.0,
        Just(f64::MAX),
        Just(f64::MIN),
        Just(f64::INFINITY),
        Just(f64::NEG_INFINITY),
        Just(f64::NAN),
    ]
}

pub fn rewards(n: usize, rs: &[f64]) -> Vec<(usize, f64)> {
    (0..n).map(|k| (k * 3 + 1, rs[k])).collect()
}

pub fn pool_identity(scope: BudgetScope, supply: f64, rounds: &[Vec<f64>]) -> Check {
    let mut pool = TokenPool::new(scope, supply).unwrap();
    for rs in rounds {
        pool.begin_round();
        let before = pool.remaining();
        let d = distribute_tokens(&mut pool, &rewards(rs.len(), rs)).unwrap();
        prop_assert!(pool.is_balanced());
        prop_assert_eq!(pool.supplied(), pool.issued() + pool.expired() + pool.remaining());
        prop_assert_eq!(before - pool.remaining(), d.issued());
        prop_assert!(d.extra.iter().all(|&e| e <= MICRO));
    }
    Ok(())
}

pub fn shares_sum_to_allotment(rs: &[f64]) -> Check {
    let n = rs.len() as u64;
    let mut pool = TokenPool::new(BudgetScope::Total, 1e4).unwrap();
    pool.begin_round();
    let d = distribute_tokens(&mut pool, &rewards(rs.len(), rs)).unwrap();
    prop_assert!(!d.scaled);
    prop_assert_eq!(d.allotment, n * (n + 1) / 2 * MICRO);
    prop_assert_eq!(d.share.iter().sum::<u64>(), d.allotment);
    Ok(())
}

pub fn scaled_shares_sum_to_remainder(rs: &[f64], supply: f64) -> Check {
    let mut pool = TokenPool::new(BudgetScope::Total, supply).unwrap();
    pool.begin_round();
    let left = pool.remaining();
    let d = distribute_tokens(&mut pool, &rewards(rs.len(), rs)).unwrap();
    if d.scaled {
        prop_assert_eq!(d.share.iter().sum::<u64>(), left);
        prop_assert_eq!(pool.remaining(), 0);
    }
    Ok(())
}

pub fn scale_invariance(rs: &[f64], c: f64) -> Check {
    let mut a = TokenPool::new(BudgetScope::Total, 1e4).unwrap();
    let mut b = a.clone();
    a.begin_round();
    b.begin_round();
    let scaled: Vec<f64> = rs.iter().map(|r| r * c).collect();
    let da = distribute_tokens(&mut a, &rewards(rs.len(), rs)).unwrap();
    let db = distribute_tokens(&mut b, &rewards(rs.len(), &scaled)).unwrap();
    for (x, y) in da.share.iter().zip(&db.share) {
        prop_assert!(x.abs_diff(*y) <= 1, "{} vs {}", x, y);
    }
    Ok(())
}

pub fn monotone_in_own_reward(rs: &[f64], k: usize, factor: f64) -> Check {
    let mut up = rs.to_vec();
    up[k] *= factor;
    let run = |v: &[f64]| {
        let mut pool = TokenPool::new(BudgetScope::Total, 1e4).unwrap();
        pool.begin_round();
        distribute_tokens(&mut pool, &rewards(v.len(), v)).unwrap().share[k]
    };
    let (lo, hi) = (run(rs), run(&up));
    let n = rs.len() as f64;
    let allot = n * (n + 1.0) / 2.0 * MICRO as f64;
    let exact = |v: &[f64]| v[k] / v.iter().sum::<f64>() * allot;
    prop_assert!(hi >= lo);
    if exact(&up) - exact(rs) > 2.0 {
        prop_assert!(hi > lo);
    }
    Ok(())
}

pub fn equal_rewards_split_evenly(r: f64, supply: f64) -> Check {
    let mut pool = TokenPool::new(BudgetScope::Total, supply).unwrap();
    pool.begin_round();
    let d = distribute_tokens(&mut pool, &rewards(5, &[r; 5])).unwrap();
    // The formula share; leftover supply may add one extra unit on top.
    prop_assert!(d.share.iter().all(|&s| s == 3 * MICRO));
    Ok(())
}

/// Drives a ledger through random reward draws with dropout applied after
/// every round; no active client may ever hold a negative-utility row.
pub fn individual_rationality(scope: BudgetScope, supply: f64, cost: f64, warmup: usize, draws: &[Vec<f64>]) -> Check {
    let clients: Vec<usize> = (0..8).collect();
    let mut ledger = RewardLedger::new(
        &clients,
        warmup,
        warmup + draws.len(),
        TokenPool::new(scope, supply).unwrap(),
    );
    for (j, rs) in draws.iter().enumerate() {
        let t = warmup + j + 1;
        let active = ledger.active();
        if active.len() < 2 {
            break;
        }
        let pairs: Vec<(usize, f64)> = active.iter().map(|&c| (c, rs[c])).collect();
        ledger.pool.begin_round();
        let d = distribute_tokens(&mut ledger.pool, &pairs).unwrap();
        let rows = pairs
            .iter()
            .enumerate()
            .map(|(k, &(c, r))| LedgerRow {
                round: t,
                client: c,
                importance: r,
                s: r,
                p: 0.0,
                r,
                floored: false,
                tokens: d.tokens(k),
                cost,
                utility: utility(d.tokens(k), cost),
                epsilon: 1.0,
                g: 0.0,
                active: true,
            })
            .collect();
        ledger.record(rows).unwrap();
        apply_dropout(&mut ledger, t);
        prop_assert!(ledger.pool.is_balanced());
        for row in ledger.rows() {
            if ledger.is_active(row.client) {
                prop_assert!(row.utility >= 0.0, "client {} at round {}", row.client, row.round);
            }
        }
    }
    Ok(())
}

pub fn epsilon_containment(start: f64, step: f64, gs: &[f64]) -> Check {
    let mut b = PrivacyBudget::new(start, (0.5, 5.0), 0.01, 0.5, step).unwrap();
    for (t, &g) in gs.iter().enumerate() {
        let s = update_epsilon(&mut b, g, t + 1);
        prop_assert!((0.5..=5.0).contains(&b.epsilon()), "{}", b.epsilon());
        let raw = s.before + step * g;
        prop_assert_eq!(s.clamped, !(0.5..=5.0).contains(&raw));
    }
    Ok(())
}

fn tag<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> String {
    move |e| format!("{name}: {e}")
}

/// Runs every property with `cases` cases each; returns the first failure.
pub fn run_all(cases: u32) -> std::result::Result<(), String> {
    let runner = || {
        TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        })
    };

    runner()
        .run(
            &(
                scope(),
                0.0f64..200.0,
                prop::collection::vec(prop::collection::vec(0.0f64..50.0, 2..9), 1..40),
            ),
            |(s, supply, rounds)| pool_identity(s, supply, &rounds),
        )
        .map_err(tag("pool identity"))?;
    runner()
        .run(&prop::collection::vec(0.0f64..1e3, 2..12), |rs| {
            shares_sum_to_allotment(&rs)
        })
        .map_err(tag("allotment"))?;
    runner()
        .run(
            &(prop::collection::vec(0.01f64..1e3, 2..12), 0.0f64..10.0),
            |(rs, supply)| scaled_shares_sum_to_remainder(&rs, supply),
        )
        .map_err(tag("scaled allotment"))?;
    runner()
        .run(
            &(prop::collection::vec(0.001f64..1e3, 2..10), 1e-3f64..1e3),
            |(rs, c)| scale_invariance(&rs, c),
        )
        .map_err(tag("scale invariance"))?;
    runner()
        .run(
            &(
                prop::collection::vec(0.1f64..100.0, 2..8),
                any::<prop::sample::Index>(),
                1.01f64..10.0,
            ),
            |(rs, pick, f)| monotone_in_own_reward(&rs, pick.index(rs.len()), f),
        )
        .map_err(tag("monotonicity"))?;
    runner()
        .run(&(1e-6f64..1e6, 15.0f64..1e4), |(r, supply)| {
            equal_rewards_split_evenly(r, supply)
        })
        .map_err(tag("symmetry"))?;
    runner()
        .run(
            &(
                scope(),
                0.0f64..60.0,
                0.0f64..4.0,
                0usize..5,
                prop::collection::vec(prop::collection::vec(0.0f64..20.0, 8), 1..30),
            ),
            |(s, supply, cost, warmup, draws)| individual_rationality(s, supply, cost, warmup, &draws),
        )
        .map_err(tag("individual rationality"))?;
    runner()
        .run(
            &(
                0.5f64..=5.0,
                0.0f64..100.0,
                prop::collection::vec(adversarial_g(), 1..200),
            ),
            |(start, step, gs)| epsilon_containment(start, step, &gs),
        )
        .map_err(tag("epsilon containment"))?;
    Ok(())
}
