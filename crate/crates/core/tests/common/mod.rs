//! Reference models and fuzz drivers shared by the property tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssd_array_sim::cache::{Access, CacheConfig, CacheEffect, PageCache, SlotView};
use ssd_array_sim::engine::{SimConfig, SimTime};
use ssd_array_sim::flusher::FlusherConfig;
use ssd_array_sim::queues::{
    Completion, Direction, DiscardReason, DispatchOutcome, DualQueue, FlushRequest, FlushView, Issue, IoRequest,
    Origin, PageFlushState, Priority, QueueConfig,
};
use ssd_array_sim::ssd::SsdConfig;
use ssd_array_sim::workload::{Alignment, IssueModel, Pattern, WorkloadSpec};

// ---- GClock -------------------------------------------------------------

pub struct SweepResult {
    pub victim: usize,
    pub hits: Vec<u8>,
    pub hand: usize,
}

/// Closed-form GClock decision.
///
/// An eligible slot with count `h` at distance `d` from the hand is first
/// seen at zero on sweep step `h * n + d`, so the victim is the eligible
/// slot minimising that step. Every eligible slot loses one count per visit
/// made before that step, which leaves the victim at zero.
pub fn gclock_reference(hits: &[u8], eligible: &[bool], hand: usize) -> Option<SweepResult> {
    let n = hits.len();
    let step = |i: usize| hits[i] as usize * n + (i + n - hand) % n;
    let victim = (0..n).filter(|&i| eligible[i]).min_by_key(|&i| step(i))?;
    let t = step(victim);
    let hits = (0..n)
        .map(|i| {
            let d = (i + n - hand) % n;
            if i == victim {
                0
            } else if !eligible[i] || d >= t {
                hits[i]
            } else {
                hits[i] - ((t - d - 1) / n + 1) as u8
            }
        })
        .collect();
    Some(SweepResult {
        victim,
        hits,
        hand: (victim + 1) % n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelPage {
    pub page: u64,
    pub dirty: bool,
    pub hits: u8,
}

/// One set driven by synchronous accesses, modelled without the cache's code.
pub struct SetModel {
    pub slots: Vec<Option<ModelPage>>,
    pub hand: usize,
    pub cap: u8,
    pub initial: u8,
    /// Evictions that had to skip dirty pages, and ones that did not.
    pub restricted: u64,
    pub unrestricted: u64,
}

impl SetModel {
    pub fn new(n: usize, cap: u8, initial: u8) -> Self {
        Self {
            slots: vec![None; n],
            hand: 0,
            cap,
            initial,
            restricted: 0,
            unrestricted: 0,
        }
    }

    /// Applies one access; returns the evicted slot, if any.
    pub fn access(&mut self, page: u64, write: bool) -> Option<usize> {
        if let Some(p) = self.slots.iter_mut().flatten().find(|p| p.page == page) {
            p.hits = (p.hits + 1).min(self.cap);
            p.dirty |= write;
            return None;
        }
        let fresh = ModelPage {
            page,
            dirty: write,
            hits: self.initial,
        };
        if let Some(i) = self.slots.iter().position(Option::is_none) {
            self.slots[i] = Some(fresh);
            return None;
        }
        let pages: Vec<ModelPage> = self.slots.iter().map(|s| s.unwrap()).collect();
        let hits: Vec<u8> = pages.iter().map(|p| p.hits).collect();
        let any_clean = pages.iter().any(|p| !p.dirty);
        let eligible: Vec<bool> = pages.iter().map(|p| !any_clean || !p.dirty).collect();
        if any_clean && pages.iter().any(|p| p.dirty) {
            self.restricted += 1;
        } else {
            self.unrestricted += 1;
        }
        let r = gclock_reference(&hits, &eligible, self.hand).expect("a full set has an eligible slot");
        for (s, h) in self.slots.iter_mut().zip(&r.hits) {
            s.as_mut().unwrap().hits = *h;
        }
        self.hand = r.hand;
        self.slots[r.victim] = Some(fresh);
        Some(r.victim)
    }

    /// First difference from a one-set cache, if any.
    pub fn diff(&self, cache: &PageCache) -> Option<String> {
        let set = cache.set(0);
        if set.hand() != self.hand {
            return Some(format!("hand {} vs {}", set.hand(), self.hand));
        }
        for (s, want) in self.slots.iter().enumerate() {
            let got = match set.slot(s) {
                SlotView::Empty => None,
                SlotView::Ready(p) => Some(ModelPage {
                    page: p.page,
                    dirty: p.dirty,
                    hits: p.hits,
                }),
                SlotView::Busy(_) => return Some(format!("slot {s} busy after synchronous completion")),
            };
            if got != *want {
                return Some(format!("slot {s}: {got:?} vs {want:?}"));
            }
        }
        None
    }
}

pub fn one_set_cache(n: usize, cap: u8, initial: u8) -> PageCache {
    PageCache::new(CacheConfig {
        pages: n,
        set_size: n,
        gclock_cap: cap,
        initial_hits: initial,
    })
    .unwrap()
}

/// Runs one access, completing any device I/O at once.
pub fn drive(cache: &mut PageCache, acc: Access) {
    let mut pending = Vec::new();
    cache.access(acc, &mut pending);
    while let Some(e) = pending.pop() {
        let mut more = Vec::new();
        match e {
            CacheEffect::Fill { set, slot, .. } => cache.on_fill_done(set, slot, 0, &mut more),
            CacheEffect::Writeback { set, slot, .. } => cache.on_writeback_done(set, slot, &mut more),
            _ => {}
        }
        pending.extend(more);
    }
}

// ---- flush scores -------------------------------------------------------

/// Score of each `(slot, hits, distance)` entry: how many entries sort
/// strictly after it by `(hits * set_size + distance, slot)`. Returned most
/// urgent first.
pub fn flush_score_oracle(pages: &[(usize, u8, usize)], set_size: usize) -> Vec<(usize, u32)> {
    let key = |&(slot, hits, dist): &(usize, u8, usize)| (hits as usize * set_size + dist, slot);
    let mut out: Vec<(usize, u32)> = pages
        .iter()
        .map(|p| (p.0, pages.iter().filter(|q| key(q) > key(p)).count() as u32))
        .collect();
    out.sort_by_key(|&(_, score)| std::cmp::Reverse(score));
    out
}

/// Dirty pages of set 0 as `(slot, hits, distance)`.
pub fn dirty_table(cache: &PageCache) -> Vec<(usize, u8, usize)> {
    let set = cache.set(0);
    let n = set.len();
    (0..n)
        .filter_map(|s| match set.slot(s) {
            SlotView::Ready(p) if p.dirty => Some((s, p.hits, (s + n - set.hand()) % n)),
            _ => None,
        })
        .collect()
}

// ---- queue fuzz ---------------------------------------------------------

pub struct View(pub HashMap<u64, PageFlushState>);

impl FlushView for View {
    fn flush_state(&self, page: u64, _set: usize) -> Option<PageFlushState> {
        self.0.get(&page).copied()
    }
}

pub fn expected_verdict(req: &FlushRequest, view: &View, threshold: u32) -> Option<DiscardReason> {
    match view.0.get(&req.page) {
        None => Some(DiscardReason::Evicted),
        Some(s) if !s.dirty || s.dirty_version != req.dirty_version => Some(DiscardReason::Cleaned),
        Some(s) if s.flush_score < threshold => Some(DiscardReason::LowScore),
        Some(_) => None,
    }
}

#[derive(Debug, Default)]
pub struct QueueTally {
    pub events: u64,
    pub low_issued: u64,
    pub high_issued: u64,
    pub discarded: u64,
    pub max_low: u32,
    pub max_total: u32,
}

/// Random enqueue, state-change, completion and dispatch steps against one
/// queue; returns the first broken rule.
pub fn queue_fuzz(seed: u64, steps: u64, tally: &mut QueueTally) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = QueueConfig {
        high_capacity: rng.random_range(1..=64),
        low_capacity: rng.random_range(1..=256),
        discard_threshold: rng.random_range(0..=10),
        ..QueueConfig::default()
    };
    let (max, low_cap) = (cfg.max_outstanding, cfg.low_slot_cap());
    let threshold = cfg.discard_threshold;
    let mut q = DualQueue::new(cfg);
    let mut view = View(HashMap::new());
    let mut high_fifo: VecDeque<u64> = VecDeque::new();
    let mut low_fifo: VecDeque<u64> = VecDeque::new();
    let (mut next_high, mut next_low) = (0u64, 0u64);
    let mut flying: Vec<Priority> = Vec::new();
    let mut out = DispatchOutcome::default();
    let high_bias = rng.random_range(0.05..0.6);
    // Per-seed mix, so some streams saturate the slots and others idle.
    let enqueue = rng.random_range(15..50);
    let restate = enqueue + 15;
    let complete = restate + rng.random_range(5..30);
    let fail = |step: u64, m: String| Err(format!("seed {seed} step {step}: {m}"));
    for step in 0..steps {
        tally.events += 1;
        let roll = rng.random_range(0..100);
        match roll {
            r if r < enqueue => {
                if rng.random_bool(high_bias) {
                    let req = IoRequest {
                        page: next_high,
                        direction: Direction::Read,
                        origin: Origin::AppRead,
                        submit_time: SimTime(0),
                        completion: Completion::DirectOp { op: next_high },
                        tag: 0,
                    };
                    if q.enqueue_high(req).is_ok() {
                        high_fifo.push_back(next_high);
                        next_high += 1;
                    }
                } else {
                    let page = 1_000_000 + rng.random_range(0..64u64);
                    // Mostly built from the page's current state, as the flusher does.
                    let version = match view.0.get(&page) {
                        Some(st) if rng.random_bool(0.8) => st.dirty_version,
                        _ => rng.random_range(0..4),
                    };
                    let req = FlushRequest {
                        id: next_low,
                        page,
                        set: 0,
                        dirty_version: version,
                        flush_score: 0,
                    };
                    if q.enqueue_low(req).is_ok() {
                        low_fifo.push_back(next_low);
                        next_low += 1;
                    }
                }
            }
            r if r < restate => {
                let page = 1_000_000 + rng.random_range(0..64u64);
                if rng.random_bool(0.1) {
                    view.0.remove(&page);
                } else {
                    view.0.insert(
                        page,
                        PageFlushState {
                            dirty: rng.random_bool(0.7),
                            dirty_version: rng.random_range(0..4),
                            flush_score: rng.random_range(0..12),
                        },
                    );
                }
            }
            r if r < complete => {
                if !flying.is_empty() {
                    let i = rng.random_range(0..flying.len());
                    q.complete(flying.swap_remove(i));
                }
            }
            _ => {
                // Passes repeat until one makes no progress, as in the engine.
                loop {
                    let high_before = q.high_len() as u32;
                    let free_total = max - q.in_flight();
                    out.clear();
                    q.dispatch(&view, &mut out);
                    let mut issued_high = 0;
                    let mut left_low = Vec::new();
                    for issue in &out.issued {
                        match issue {
                            Issue::High(r) => {
                                if high_fifo.pop_front() != Some(r.page) {
                                    return fail(step, "high FIFO order".into());
                                }
                                flying.push(Priority::High);
                                issued_high += 1;
                                tally.high_issued += 1;
                            }
                            Issue::Low(r) => {
                                if high_before > 0 {
                                    return fail(step, "flush issued while application requests wait".into());
                                }
                                if expected_verdict(r, &view, threshold).is_some() {
                                    return fail(step, format!("stale flush {} issued", r.id));
                                }
                                left_low.push(r.id);
                                flying.push(Priority::Low);
                                tally.low_issued += 1;
                            }
                        }
                    }
                    for (r, reason) in &out.discarded {
                        if expected_verdict(r, &view, threshold) != Some(*reason) {
                            return fail(step, format!("flush {} dropped as {reason:?}", r.id));
                        }
                        left_low.push(r.id);
                        tally.discarded += 1;
                    }
                    // Issued and dropped requests together leave from the head in order.
                    left_low.sort_unstable();
                    for id in left_low {
                        if low_fifo.pop_front() != Some(id) {
                            return fail(step, "low FIFO order".into());
                        }
                    }
                    if out.refill != !out.discarded.is_empty() {
                        return fail(step, "refill flag disagrees with discards".into());
                    }
                    // Reservation: waiting application requests get every free slot.
                    if issued_high != free_total.min(high_before) {
                        return fail(step, format!("{issued_high} high issued, {free_total} slots free"));
                    }
                    if out.issued.is_empty() && out.discarded.is_empty() {
                        break;
                    }
                }
                q.check_settled().or_else(|m| fail(step, m))?;
            }
        }
        if q.in_flight() > max || q.in_flight_low() > low_cap {
            return fail(step, format!("{} in flight, {} low", q.in_flight(), q.in_flight_low()));
        }
        tally.max_low = tally.max_low.max(q.in_flight_low());
        tally.max_total = tally.max_total.max(q.in_flight());
    }
    Ok(())
}

// ---- engine fuzz --------------------------------------------------------

/// A small random configuration that still fills queues and triggers GC.
pub fn random_sim_config(seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_ssds = rng.random_range(1..=4);
    let ssd = SsdConfig {
        pages_per_block: 32,
        physical_blocks: rng.random_range(48..=96),
        jitter_us: if rng.random_bool(0.3) { 40 } else { 0 },
        ..SsdConfig::default()
    };
    let cached = rng.random_bool(0.8);
    let unaligned = rng.random_bool(0.3);
    let depth = [1, 4, 32, 128][rng.random_range(0..4)];
    let issue = match rng.random_range(0..3) {
        0 => IssueModel::Sync {
            threads: rng.random_range(1..=64),
        },
        1 => IssueModel::Async { depth_per_ssd: depth },
        _ => IssueModel::Independent { depth_per_ssd: depth },
    };
    SimConfig {
        seed,
        num_ssds,
        ssd,
        stripe_unit: 4096 * rng.random_range(1..=2),
        cache: cached.then(|| CacheConfig {
            pages: rng.random_range(1..=40) * 12,
            initial_hits: rng.random_range(0..=2),
            ..CacheConfig::default()
        }),
        queues: QueueConfig {
            high_capacity: rng.random_range(4..=64),
            low_capacity: rng.random_range(8..=256),
            discard_threshold: rng.random_range(0..=11),
            ..QueueConfig::default()
        },
        flusher: (cached && rng.random_bool(0.75)).then(|| FlusherConfig {
            threshold: rng.random_range(0..=8),
            batch: rng.random_range(1..=2),
            global_cap_per_ssd: rng.random_range(1..=64),
        }),
        workload: WorkloadSpec {
            pattern: if rng.random_bool(0.5) {
                Pattern::Uniform
            } else {
                Pattern::Zipfian { exponent: 0.99 }
            },
            read_fraction: [0.0, 0.2, 0.5, 0.8][rng.random_range(0..4)],
            op_size: if unaligned { 128 } else { 4096 * rng.random_range(1..=2) },
            alignment: if unaligned { Alignment::Unaligned } else { Alignment::Aligned },
            issue,
            occupancy: rng.random_range(0.3..0.9),
            total_ops: 8_000,
        },
        warmup_fraction: 0.1,
        sample_every: 64,
        check_invariants: true,
        precondition_passes: 1.0,
    }
}
