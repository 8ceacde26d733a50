//! GClock victim selection against the closed-form reference.

mod common;

use common::{drive, gclock_reference, one_set_cache, SetModel};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use ssd_array_sim::cache::{gclock_sweep, Access, AccessKind};

const CASES: u32 = 10_000;

fn sweep_case() -> impl Strategy<Value = (Vec<u8>, Vec<bool>, usize)> {
    (1usize..=4).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..=8, n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
    })
}

fn sequence() -> impl Strategy<Value = (usize, u8, u8, Vec<(u64, bool)>)> {
    (1usize..=4, 1u8..=4).prop_flat_map(|(n, cap)| {
        (
            Just(n),
            Just(cap),
            0..=cap,
            prop::collection::vec((0u64..(2 * n as u64 + 2), prop::bool::weighted(0.4)), 1..60),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn sweep_matches_closed_form((hits, eligible, hand) in sweep_case()) {
        let mut h = hits.clone();
        let mut at = hand;
        let got = gclock_sweep(&mut h, &eligible, &mut at);
        match gclock_reference(&hits, &eligible, hand) {
            None => prop_assert_eq!(got, None),
            Some(r) => {
                prop_assert_eq!(got, Some(r.victim));
                prop_assert_eq!(h, r.hits);
                prop_assert_eq!(at, r.hand);
            }
        }
    }

    #[test]
    fn cache_victims_match_model((n, cap, initial, ops) in sequence()) {
        let mut cache = one_set_cache(n, cap, initial);
        let mut model = SetModel::new(n, cap, initial);
        for (i, &(page, write)) in ops.iter().enumerate() {
            let kind = if write { AccessKind::WriteFull } else { AccessKind::Read };
            let before = cache.stats();
            drive(&mut cache, Access::new(i as u64, page, kind, i as u64 + 1));
            let victim = model.access(page, write);
            let after = cache.stats();
            let evicted = after.clean_evictions + after.dirty_evictions > before.clean_evictions + before.dirty_evictions;
            prop_assert_eq!(evicted, victim.is_some(), "op {}", i);
            if let Some(v) = victim {
                prop_assert_eq!(cache.last_eviction().unwrap().slot, v, "op {}", i);
            }
            prop_assert_eq!(model.diff(&cache), None, "op {}", i);
        }
    }
}

/// Both eviction paths are reached by the generated sequences.
#[test]
fn both_paths_are_exercised() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let (mut restricted, mut unrestricted) = (0, 0);
    for _ in 0..2_000 {
        let (n, cap, initial, ops) = sequence().new_tree(&mut runner).unwrap().current();
        let mut m = SetModel::new(n, cap, initial);
        for (page, write) in ops {
            m.access(page, write);
        }
        restricted += m.restricted;
        unrestricted += m.unrestricted;
    }
    assert!(restricted > 1000 && unrestricted > 1000, "{restricted} {unrestricted}");
}
