//! Background flusher: proactively writes dirty pages to their SSDs through
//! the low-priority queues so that evictions find clean victims.
//!
//! A set joins the flusher's round-robin FIFO once it holds more than
//! `threshold` dirty pages. Each visit takes up to `batch` of the set's dirty
//! pages, most urgent first, and the set goes back to the tail while it still
//! has candidates. Urgency follows the clock: a page the hand will reach soon
//! (low `hits * set_size + distance`) scores high. Pages ranked below the
//! queues' discard threshold are not sent, since the queue head would drop
//! them anyway.

use std::collections::VecDeque;

use crate::cache::PageCache;
use crate::mapping::ArrayLayout;
use crate::queues::{DiscardReason, DualQueue, FlushRequest};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlusherConfig {
    pub threshold: usize,
    pub batch: usize,
    /// Outstanding flush requests allowed per SSD.
    pub global_cap_per_ssd: usize,
}

impl Default for FlusherConfig {
    fn default() -> Self {
        Self {
            threshold: 6,
            batch: 2,
            global_cap_per_ssd: 2048,
        }
    }
}

impl FlusherConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch == 0 || self.global_cap_per_ssd == 0 {
            return Err("flusher batch and cap must be positive".into());
        }
        Ok(())
    }
}

/// Score of one page in a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreEntry {
    pub slot: usize,
    pub distance_score: usize,
    /// `k - 1` for the most urgent of `k` scored pages, 0 for the least.
    pub flush_score: u32,
}

/// Ranks `(slot, hits, distance)` triples: ascending `hits * set_size +
/// distance`, ties by slot, turned into descending scores. The result is
/// ordered most urgent first.
pub fn rank_pages(pages: &[(usize, u8, usize)], set_size: usize) -> Vec<ScoreEntry> {
    let mut scored: Vec<(usize, usize)> = pages
        .iter()
        .map(|&(slot, hits, dist)| (hits as usize * set_size + dist, slot))
        .collect();
    scored.sort_unstable();
    let k = scored.len() as u32;
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (ds, slot))| ScoreEntry {
            slot,
            distance_score: ds,
            flush_score: k - 1 - i as u32,
        })
        .collect()
}

/// Scores of the dirty ready pages of a set that have no flush outstanding.
pub fn compute_flush_scores(cache: &PageCache, set_idx: usize) -> Vec<ScoreEntry> {
    let set = cache.set(set_idx);
    let pages: Vec<_> = set
        .ready_pages()
        .filter(|(_, p)| p.dirty && p.flush.is_none())
        .map(|(i, p)| (i, p.hits, set.distance(i)))
        .collect();
    rank_pages(&pages, set.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SetState {
    Idle,
    Queued,
    /// Above threshold but nothing sendable; waits for the set to change.
    Parked,
    /// Its most urgent candidate targets an SSD whose low queue is full.
    Blocked,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlushStats {
    pub issued: u64,
    pub completed: u64,
    pub discarded_evicted: u64,
    pub discarded_cleaned: u64,
    pub discarded_low_score: u64,
    pub pages_cleaned: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushOutcome {
    Completed,
    Discarded(DiscardReason),
}

#[derive(Debug, Clone)]
pub struct Flusher {
    cfg: FlusherConfig,
    global_cap: usize,
    min_rank: u32,
    fifo: VecDeque<usize>,
    state: Vec<SetState>,
    blocked: Vec<Vec<usize>>,
    outstanding: usize,
    next_id: u64,
    stats: FlushStats,
}

impl Flusher {
    /// `min_rank` is the queues' discard threshold.
    pub fn new(cfg: FlusherConfig, num_sets: usize, num_ssds: usize, min_rank: u32) -> Self {
        Self {
            global_cap: cfg.global_cap_per_ssd * num_ssds,
            cfg,
            min_rank,
            fifo: VecDeque::new(),
            state: vec![SetState::Idle; num_sets],
            blocked: vec![Vec::new(); num_ssds],
            outstanding: 0,
            next_id: 1,
            stats: FlushStats::default(),
        }
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    pub fn global_cap(&self) -> usize {
        self.global_cap
    }

    pub fn stats(&self) -> FlushStats {
        self.stats
    }

    pub fn queued_sets(&self) -> usize {
        self.fifo.len()
    }

    pub fn blocked_sets(&self) -> usize {
        self.blocked.iter().map(Vec::len).sum()
    }

    /// A page of `set` was dirtied; queues the set once it crosses the threshold.
    pub fn on_page_dirtied(&mut self, set: usize, cache: &PageCache) {
        self.touch(set, cache);
    }

    /// Re-examines a set after anything about it changed.
    pub fn touch(&mut self, set: usize, cache: &PageCache) {
        let waiting = matches!(self.state[set], SetState::Queued | SetState::Blocked);
        if !waiting && cache.set(set).dirty_count() > self.cfg.threshold {
            self.state[set] = SetState::Queued;
            self.fifo.push_back(set);
        }
    }

    /// Pages of a set worth sending now, most urgent first.
    fn candidates(&self, cache: &PageCache, set_idx: usize) -> Vec<ScoreEntry> {
        let set = cache.set(set_idx);
        let all: Vec<_> = set.ready_pages().map(|(i, p)| (i, p.hits, set.distance(i))).collect();
        let ranked = rank_pages(&all, set.len());
        let mut eligible = vec![false; set.len()];
        for e in &ranked {
            eligible[e.slot] = e.flush_score >= self.min_rank;
        }
        compute_flush_scores(cache, set_idx)
            .into_iter()
            .filter(|e| eligible[e.slot])
            .collect()
    }

    /// Moves flush requests into low-priority queues until the outstanding
    /// cap is reached or a full pass over the queued sets sends nothing.
    /// SSDs that received requests are appended to `touched`.
    pub fn pump(&mut self, cache: &mut PageCache, queues: &mut [DualQueue], layout: &ArrayLayout, touched: &mut Vec<usize>) -> usize {
        let mut sent_total = 0;
        let mut idle_visits = 0;
        for (ssd, sets) in self.blocked.iter_mut().enumerate() {
            if queues[ssd].low_has_room() {
                for set in sets.drain(..) {
                    self.state[set] = SetState::Queued;
                    self.fifo.push_back(set);
                }
            }
        }
        while self.outstanding < self.global_cap && idle_visits < self.fifo.len() {
            let Some(set_idx) = self.fifo.pop_front() else { break };
            let candidates = self.candidates(cache, set_idx);
            if candidates.is_empty() {
                self.state[set_idx] = if cache.set(set_idx).dirty_count() > self.cfg.threshold {
                    SetState::Parked
                } else {
                    SetState::Idle
                };
                continue;
            }
            let mut sent = 0;
            let mut first_full = None;
            for entry in candidates {
                if sent == self.cfg.batch || self.outstanding >= self.global_cap {
                    break;
                }
                let set = cache.set(set_idx);
                let crate::cache::SlotView::Ready(page) = set.slot(entry.slot) else {
                    unreachable!("candidates are ready pages")
                };
                let ssd = layout.ssd_of(page.page);
                if !queues[ssd].low_has_room() {
                    first_full.get_or_insert(ssd);
                    continue;
                }
                let req = FlushRequest {
                    id: self.next_id,
                    page: page.page,
                    set: set_idx,
                    dirty_version: page.dirty_version,
                    flush_score: entry.flush_score,
                };
                queues[ssd].enqueue_low(req).expect("room checked");
                cache.set_flush_pending(set_idx, entry.slot, req.id);
                self.next_id += 1;
                self.outstanding += 1;
                self.stats.issued += 1;
                sent += 1;
                touched.push(ssd);
            }
            if sent == 0 {
                if let Some(ssd) = first_full {
                    self.state[set_idx] = SetState::Blocked;
                    self.blocked[ssd].push(set_idx);
                    continue;
                }
                self.fifo.push_back(set_idx);
                idle_visits += 1;
            } else {
                self.fifo.push_back(set_idx);
                idle_visits = 0;
                sent_total += sent;
            }
        }
        sent_total
    }

    /// A flush request left the system, written or discarded.
    pub fn on_flush_event(&mut self, outcome: FlushOutcome, req: &FlushRequest, cache: &mut PageCache) {
        debug_assert!(self.outstanding > 0);
        self.outstanding -= 1;
        let completed = match outcome {
            FlushOutcome::Completed => {
                self.stats.completed += 1;
                true
            }
            FlushOutcome::Discarded(reason) => {
                match reason {
                    DiscardReason::Evicted => self.stats.discarded_evicted += 1,
                    DiscardReason::Cleaned => self.stats.discarded_cleaned += 1,
                    DiscardReason::LowScore => self.stats.discarded_low_score += 1,
                }
                false
            }
        };
        if cache.finish_flush(req.page, req.id, completed, req.dirty_version) {
            self.stats.pages_cleaned += 1;
        }
        self.touch(req.set, cache);
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{Access, AccessKind, CacheConfig, CacheEffect};
    use crate::queues::QueueConfig;

    fn cache(sets: usize) -> PageCache {
        PageCache::new(CacheConfig {
            pages: 12 * sets,
            set_size: 12,
            gclock_cap: 8,
            initial_hits: 1,
        })
        .unwrap()
    }

    /// Pages that hash into `set`.
    fn pages_in(cache: &PageCache, set: usize, n: usize) -> Vec<u64> {
        (0..).filter(|&p| cache.lookup_set(p) == set).take(n).collect()
    }

    fn write(cache: &mut PageCache, page: u64, tag: u64) {
        let mut out = Vec::new();
        cache.access(Access::new(tag, page, AccessKind::WriteFull, tag), &mut out);
        assert!(out.iter().any(|e| matches!(e, CacheEffect::Complete { .. })));
    }

    #[test]
    fn rank_pages_example() {
        // hits [2,0,1], distances [0,1,2], set_size 12 -> 24, 1, 14.
        let r = rank_pages(&[(0, 2, 0), (1, 0, 1), (2, 1, 2)], 12);
        let by_slot: Vec<_> = (0..3)
            .map(|s| r.iter().find(|e| e.slot == s).unwrap().flush_score)
            .collect();
        assert_eq!(by_slot, vec![0, 2, 1]);
        assert_eq!(r[0].slot, 1);
        assert_eq!(r[0].distance_score, 1);
    }

    #[test]
    fn rank_ties_break_by_slot() {
        let r = rank_pages(&[(3, 1, 0), (1, 0, 12)], 12);
        assert_eq!(r[0].slot, 1);
        assert_eq!(r[1].slot, 3);
    }

    fn one_ssd() -> (ArrayLayout, Vec<DualQueue>) {
        (
            ArrayLayout::new(1, 4096, 4096, 1 << 20).unwrap(),
            vec![DualQueue::new(QueueConfig {
                discard_threshold: 0,
                ..QueueConfig::default()
            })],
        )
    }

    #[test]
    fn set_below_threshold_is_not_queued() {
        let mut c = cache(1);
        let mut f = Flusher::new(FlusherConfig::default(), 1, 1, 0);
        for (i, p) in pages_in(&c, 0, 6).into_iter().enumerate() {
            write(&mut c, p, i as u64 + 1);
            f.on_page_dirtied(0, &c);
        }
        assert_eq!(f.queued_sets(), 0);
    }

    #[test]
    fn sends_batches_in_round_robin_order() {
        let mut c = cache(2);
        let cfg = FlusherConfig {
            batch: 1,
            ..FlusherConfig::default()
        };
        let mut f = Flusher::new(cfg, 2, 1, 0);
        let mut tag = 1;
        for set in [0, 1] {
            for p in pages_in(&c, set, 8) {
                write(&mut c, p, tag);
                tag += 1;
                f.on_page_dirtied(set, &c);
            }
        }
        assert_eq!(f.queued_sets(), 2);
        let (layout, mut queues) = one_ssd();
        let mut touched = Vec::new();
        let sent = f.pump(&mut c, &mut queues, &layout, &mut touched);
        assert_eq!(sent, 16);
        assert_eq!(f.outstanding(), 16);
        let mut sets = Vec::new();
        let mut out = crate::queues::DispatchOutcome::default();
        // Drain the low queue through repeated dispatch/complete cycles.
        while queues[0].low_len() > 0 {
            queues[0].dispatch(&c, &mut out);
            for issue in out.issued.drain(..) {
                if let crate::queues::Issue::Low(r) = issue {
                    sets.push(r.set);
                    queues[0].complete(crate::queues::Priority::Low);
                }
            }
        }
        assert_eq!(&sets[..4], &[0, 1, 0, 1]);
    }

    #[test]
    fn one_visit_takes_a_batch_of_the_most_urgent_pages() {
        let mut c = cache(1);
        for (i, p) in pages_in(&c, 0, 8).into_iter().enumerate() {
            write(&mut c, p, i as u64 + 1);
        }
        let cfg = FlusherConfig {
            global_cap_per_ssd: 2,
            ..FlusherConfig::default()
        };
        let mut f2 = Flusher::new(cfg, 1, 1, 0);
        f2.on_page_dirtied(0, &c);
        let (layout, mut queues) = one_ssd();
        let mut touched = Vec::new();
        assert_eq!(f2.pump(&mut c, &mut queues, &layout, &mut touched), 2);
        assert_eq!(f2.queued_sets(), 1);
        // Slots 0 and 1 sit nearest the hand.
        let pending: Vec<_> = c.set(0).ready_pages().filter(|(_, p)| p.flush.is_some()).map(|(i, _)| i).collect();
        assert_eq!(pending, vec![0, 1]);
    }

    #[test]
    fn outstanding_never_exceeds_cap() {
        let mut c = cache(4);
        let cfg = FlusherConfig {
            global_cap_per_ssd: 3,
            ..FlusherConfig::default()
        };
        let mut f = Flusher::new(cfg, 4, 1, 0);
        let mut tag = 1;
        for set in 0..4 {
            for p in pages_in(&c, set, 10) {
                write(&mut c, p, tag);
                tag += 1;
                f.on_page_dirtied(set, &c);
            }
        }
        let (layout, mut queues) = one_ssd();
        f.pump(&mut c, &mut queues, &layout, &mut Vec::new());
        assert_eq!(f.outstanding(), 3);
    }

    #[test]
    fn sets_wait_for_a_full_low_queue_to_drain() {
        let mut c = cache(2);
        let mut f = Flusher::new(FlusherConfig::default(), 2, 1, 0);
        let mut tag = 1;
        for set in [0, 1] {
            for p in pages_in(&c, set, 8) {
                write(&mut c, p, tag);
                tag += 1;
                f.on_page_dirtied(set, &c);
            }
        }
        let layout = ArrayLayout::new(1, 4096, 4096, 1 << 20).unwrap();
        let mut queues = vec![DualQueue::new(QueueConfig {
            low_capacity: 2,
            discard_threshold: 0,
            ..QueueConfig::default()
        })];
        assert_eq!(f.pump(&mut c, &mut queues, &layout, &mut Vec::new()), 2);
        assert_eq!((f.queued_sets(), f.blocked_sets()), (0, 2));
        // Touching a blocked set must not queue it twice.
        f.touch(1, &c);
        assert_eq!(f.queued_sets(), 0);
        // Still full: nothing moves.
        assert_eq!(f.pump(&mut c, &mut queues, &layout, &mut Vec::new()), 0);
        let mut out = crate::queues::DispatchOutcome::default();
        queues[0].dispatch(&c, &mut out);
        assert_eq!(queues[0].low_len(), 0);
        assert_eq!(f.pump(&mut c, &mut queues, &layout, &mut Vec::new()), 2);
        assert_eq!(f.blocked_sets(), 2);
        assert_eq!(f.outstanding(), 4);
    }

    #[test]
    fn completion_cleans_only_matching_version() {
        let mut c = cache(1);
        let mut f = Flusher::new(FlusherConfig::default(), 1, 1, 0);
        let pages = pages_in(&c, 0, 7);
        for (i, &p) in pages.iter().enumerate() {
            write(&mut c, p, i as u64 + 1);
            f.on_page_dirtied(0, &c);
        }
        let layout = ArrayLayout::new(1, 4096, 4096, 1 << 20).unwrap();
        let mut queues = vec![DualQueue::new(QueueConfig {
            discard_threshold: 0,
            ..QueueConfig::default()
        })];
        f.pump(&mut c, &mut queues, &layout, &mut Vec::new());
        let mut out = crate::queues::DispatchOutcome::default();
        queues[0].dispatch(&c, &mut out);
        let reqs: Vec<_> = out
            .issued
            .iter()
            .filter_map(|i| match i {
                crate::queues::Issue::Low(r) => Some(*r),
                _ => None,
            })
            .collect();
        assert!(reqs.len() >= 2);
        // Re-dirty the first target after issue; its completion must not clean it.
        write(&mut c, reqs[0].page, 1000);
        f.on_flush_event(FlushOutcome::Completed, &reqs[0], &mut c);
        f.on_flush_event(FlushOutcome::Completed, &reqs[1], &mut c);
        assert!(c.resident(reqs[0].page).unwrap().dirty);
        assert!(!c.resident(reqs[1].page).unwrap().dirty);
        assert_eq!(f.stats().pages_cleaned, 1);
        c.verify_all().unwrap();
    }
}
