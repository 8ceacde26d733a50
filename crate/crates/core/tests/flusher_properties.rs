use proptest::prelude::*;
use ssd_array_sim::cache::{Access, AccessKind, CacheConfig, CacheEffect, PageCache};
use ssd_array_sim::flusher::{FlushOutcome, Flusher, FlusherConfig};
use ssd_array_sim::mapping::ArrayLayout;
use ssd_array_sim::queues::{DispatchOutcome, DualQueue, Issue, Priority, QueueConfig};

struct Rig {
    cache: PageCache,
    flusher: Flusher,
    queues: Vec<DualQueue>,
    layout: ArrayLayout,
    issued_per_set: Vec<u64>,
    tag: u64,
}

impl Rig {
    fn new(sets: usize, threshold: usize, discard: u32) -> Self {
        let cache = PageCache::new(CacheConfig {
            pages: 12 * sets,
            ..CacheConfig::default()
        })
        .unwrap();
        let cfg = FlusherConfig {
            threshold,
            ..FlusherConfig::default()
        };
        Self {
            flusher: Flusher::new(cfg, sets, 2, discard),
            cache,
            queues: (0..2)
                .map(|_| {
                    DualQueue::new(QueueConfig {
                        discard_threshold: discard,
                        ..QueueConfig::default()
                    })
                })
                .collect(),
            layout: ArrayLayout::new(2, 4096, 4096, 1 << 20).unwrap(),
            issued_per_set: vec![0; sets],
            tag: 0,
        }
    }

    /// Pages that hash into `set`.
    fn pages_in(&self, set: usize, n: usize) -> Vec<u64> {
        (0..).filter(|&p| self.cache.lookup_set(p) == set).take(n).collect()
    }

    fn write(&mut self, page: u64) {
        self.tag += 1;
        let mut pending = Vec::new();
        self.cache
            .access(Access::new(self.tag, page, AccessKind::WriteFull, self.tag), &mut pending);
        while let Some(e) = pending.pop() {
            let mut more = Vec::new();
            match e {
                CacheEffect::Writeback { set, slot, .. } => self.cache.on_writeback_done(set, slot, &mut more),
                CacheEffect::Fill { set, slot, .. } => self.cache.on_fill_done(set, slot, 0, &mut more),
                CacheEffect::Dirtied { set } => self.flusher.on_page_dirtied(set, &self.cache),
                _ => {}
            }
            pending.extend(more);
        }
    }

    /// Pumps, issues and completes flush writes until nothing moves.
    fn settle(&mut self) {
        let mut out = DispatchOutcome::default();
        loop {
            self.flusher
                .pump(&mut self.cache, &mut self.queues, &self.layout, &mut Vec::new());
            let mut moved = false;
            for ssd in 0..self.queues.len() {
                out.clear();
                self.queues[ssd].dispatch(&self.cache, &mut out);
                for (req, reason) in out.discarded.drain(..) {
                    moved = true;
                    self.flusher
                        .on_flush_event(FlushOutcome::Discarded(reason), &req, &mut self.cache);
                }
                for issue in out.issued.drain(..) {
                    let Issue::Low(req) = issue else { unreachable!("no application I/O here") };
                    moved = true;
                    self.issued_per_set[req.set] += 1;
                    self.queues[ssd].complete(Priority::Low);
                    self.flusher.on_flush_event(FlushOutcome::Completed, &req, &mut self.cache);
                }
            }
            if !moved {
                break;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// The set that takes more writes is flushed at least as often.
    #[test]
    fn busier_set_gets_at_least_as_many_flushes(
        hot in 40usize..400,
        ratio in 2usize..8,
        picks in prop::collection::vec(0usize..20, 400),
        settle_every in 1usize..40,
    ) {
        let cold = hot / ratio;
        let mut rig = Rig::new(2, 6, 0);
        let pools = [rig.pages_in(0, 20), rig.pages_in(1, 20)];
        let mut writes = [0usize; 2];
        for i in 0..hot + cold {
            // Every (ratio + 1)-th write goes to the cold set.
            let set = if (i % (ratio + 1) == ratio && writes[1] < cold) || writes[0] == hot { 1 } else { 0 };
            let page = pools[set][picks[(writes[set] + i) % picks.len()]];
            writes[set] += 1;
            rig.write(page);
            if i % settle_every == 0 {
                rig.settle();
            }
        }
        rig.settle();
        prop_assert!(rig.issued_per_set[0] >= rig.issued_per_set[1], "{:?} {:?}", writes, rig.issued_per_set);
    }

    /// With writes stopped, every dirty page of a set above the threshold is cleaned.
    #[test]
    fn triggered_sets_drain_completely(
        threshold in 0usize..8,
        writes in prop::collection::vec((0usize..6, 0usize..24), 1..600),
        settle_every in 1usize..50,
    ) {
        let mut rig = Rig::new(6, threshold, 0);
        let pools: Vec<Vec<u64>> = (0..6).map(|s| rig.pages_in(s, 24)).collect();
        for (i, &(set, k)) in writes.iter().enumerate() {
            rig.write(pools[set][k]);
            if i % settle_every == 0 {
                rig.settle();
            }
        }
        let triggered: Vec<usize> = (0..6).filter(|&s| rig.cache.set(s).dirty_count() > threshold).collect();
        rig.settle();
        for s in triggered {
            prop_assert_eq!(rig.cache.set(s).dirty_count(), 0, "set {}", s);
        }
        prop_assert_eq!(rig.flusher.outstanding(), 0);
        rig.cache.verify_all().unwrap();
    }
}
