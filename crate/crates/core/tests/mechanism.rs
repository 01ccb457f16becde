//! Property tests for the token mechanism and ε clamping.

mod common;

use common::invariants::*;
use opus_vfl::incentive::{distribute_tokens, BudgetScope, TokenPool};
use proptest::prelude::*;

proptest! {
    #[test]
    fn pool_identity_holds_every_round(
        scope in scope(),
        supply in 0.0f64..200.0,
        rounds in prop::collection::vec(prop::collection::vec(0.0f64..50.0, 2..9), 1..40),
    ) {
        pool_identity(scope, supply, &rounds)?;
    }

    #[test]
    fn shares_sum_to_the_allotment(rs in prop::collection::vec(0.0f64..1e3, 2..12)) {
        shares_sum_to_allotment(&rs)?;
    }

    #[test]
    fn scaled_shares_sum_to_what_was_left(
        rs in prop::collection::vec(0.01f64..1e3, 2..12),
        supply in 0.0f64..10.0,
    ) {
        scaled_shares_sum_to_remainder(&rs, supply)?;
    }

    #[test]
    fn shares_are_scale_invariant(
        rs in prop::collection::vec(0.001f64..1e3, 2..10),
        c in 1e-3f64..1e3,
    ) {
        scale_invariance(&rs, c)?;
    }

    #[test]
    fn raising_one_reward_raises_its_share(
        rs in prop::collection::vec(0.1f64..100.0, 2..8),
        pick in any::<prop::sample::Index>(),
        factor in 1.01f64..10.0,
    ) {
        monotone_in_own_reward(&rs, pick.index(rs.len()), factor)?;
    }

    #[test]
    fn equal_rewards_split_evenly(r in 1e-6f64..1e6, supply in 15.0f64..1e4) {
        common::invariants::equal_rewards_split_evenly(r, supply)?;
    }

    #[test]
    fn active_clients_never_run_at_a_loss(
        scope in scope(),
        supply in 0.0f64..60.0,
        cost in 0.0f64..4.0,
        warmup in 0usize..5,
        draws in prop::collection::vec(prop::collection::vec(0.0f64..20.0, 8), 1..30),
    ) {
        individual_rationality(scope, supply, cost, warmup, &draws)?;
    }

    #[test]
    fn epsilon_stays_in_bounds_under_any_gradient(
        start in 0.5f64..=5.0,
        step in 0.0f64..100.0,
        gs in prop::collection::vec(adversarial_g(), 1..200),
    ) {
        epsilon_containment(start, step, &gs)?;
    }
}

#[test]
fn five_equal_clients_get_three_tokens() {
    let mut pool = TokenPool::new(BudgetScope::Total, 15.0).unwrap();
    pool.begin_round();
    let d = distribute_tokens(&mut pool, &rewards(5, &[4.2; 5])).unwrap();
    for k in 0..5 {
        assert_eq!(d.tokens(k), 3.0);
    }
}
