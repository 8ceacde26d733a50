//! Random operation streams against one DualQueue, checked after every step.

mod common;

use common::{queue_fuzz, QueueTally};

#[test]
fn a_million_events_keep_every_queue_rule() {
    let mut tally = QueueTally::default();
    for seed in 0..20 {
        queue_fuzz(seed, 60_000, &mut tally).unwrap();
    }
    assert!(tally.events >= 1_000_000);
    assert!(tally.low_issued > 10_000 && tally.high_issued > 10_000 && tally.discarded > 10_000);
    // The caps are reached, not just respected.
    assert_eq!((tally.max_low, tally.max_total), (25, 32));
}
