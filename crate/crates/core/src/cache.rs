//! Set-associative write-back page cache.
//!
//! Pages hash to small fixed-size sets, each with its own GClock hand.
//! Eviction prefers clean pages: the clock sweeps only clean pages while any
//! exist and falls back to sweeping every page otherwise, in which case the
//! victim must be written back before its slot is reused.
//!
//! A slot that is waiting on device I/O (a victim writeback or a fill read)
//! is *busy*: it already belongs to the incoming page, is never chosen as a
//! victim, and queues later accesses to that page until the I/O finishes.

use std::collections::VecDeque;

use crate::mapping::PageId;
use crate::queues::{FlushView, PageFlushState};

/// Largest supported set size; keeps the sweep scratch space on the stack.
pub const MAX_SET_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheConfig {
    /// Total page slots; rounded down to whole sets.
    pub pages: usize,
    pub set_size: usize,
    /// Saturation cap of the GClock reference counter.
    pub gclock_cap: u8,
    /// Reference count given to a newly inserted page.
    pub initial_hits: u8,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            pages: 12 * 1024,
            set_size: 12,
            gclock_cap: 8,
            initial_hits: 1,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.set_size == 0 || self.set_size > MAX_SET_SIZE {
            return Err(format!("set_size must lie in 1..={MAX_SET_SIZE}"));
        }
        if self.pages < self.set_size {
            return Err("cache must hold at least one full set".into());
        }
        if self.initial_hits > self.gclock_cap {
            return Err("initial_hits cannot exceed gclock_cap".into());
        }
        Ok(())
    }

    pub fn num_sets(&self) -> usize {
        self.pages / self.set_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    WriteFull,
    /// Sub-page write; needs the page's current contents first.
    WritePartial,
}

impl AccessKind {
    fn needs_fill(self) -> bool {
        !matches!(self, AccessKind::WriteFull)
    }
}

/// One page-level access made on behalf of an application op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub token: u64,
    pub page: PageId,
    pub kind: AccessKind,
    /// Data tag written by a write access.
    pub tag: u64,
    counted: bool,
}

impl Access {
    pub fn new(token: u64, page: PageId, kind: AccessKind, tag: u64) -> Self {
        Self {
            token,
            page,
            kind,
            tag,
            counted: false,
        }
    }
}

/// Work the cache asks its caller to carry out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheEffect {
    /// The access finished; reads report the data tag they observed.
    Complete { token: u64, page: PageId, read_tag: Option<u64> },
    /// A write landed in the cache.
    Applied { page: PageId, tag: u64 },
    /// A page in this set became dirty or was re-dirtied.
    Dirtied { set: usize },
    /// Write this victim back; then call [`PageCache::on_writeback_done`].
    Writeback { page: PageId, tag: u64, set: usize, slot: usize },
    /// Read this page from its device; then call [`PageCache::on_fill_done`].
    Fill { page: PageId, set: usize, slot: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachePage {
    pub page: PageId,
    pub dirty: bool,
    pub hits: u8,
    /// Tag of the write that last dirtied the page; tags grow with every write.
    pub dirty_version: u64,
    /// Tag of the data currently held.
    pub data_tag: u64,
    /// Id of the flush request covering this page, if one is queued or in flight.
    pub flush: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BusyPhase {
    AwaitWriteback,
    Filling,
}

#[derive(Debug, Clone)]
struct BusySlot {
    page: PageId,
    phase: BusyPhase,
    first: Access,
    waiters: Vec<Access>,
}

#[derive(Debug, Clone)]
enum Slot {
    Empty,
    Ready(CachePage),
    Busy(BusySlot),
}

impl Slot {
    fn page(&self) -> Option<PageId> {
        match self {
            Slot::Empty => None,
            Slot::Ready(p) => Some(p.page),
            Slot::Busy(b) => Some(b.page),
        }
    }
}

/// Read-only view of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotView<'a> {
    Empty,
    Ready(&'a CachePage),
    Busy(PageId),
}

#[derive(Debug, Clone)]
pub struct PageSet {
    slots: Vec<Slot>,
    hand: usize,
    dirty_count: usize,
    waiters: VecDeque<Access>,
}

impl PageSet {
    fn new(set_size: usize) -> Self {
        Self {
            slots: vec![Slot::Empty; set_size],
            hand: 0,
            dirty_count: 0,
            waiters: VecDeque::new(),
        }
    }

    pub fn hand(&self) -> usize {
        self.hand
    }

    pub fn dirty_count(&self) -> usize {
        self.dirty_count
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(|s| matches!(s, Slot::Empty))
    }

    pub fn slot(&self, i: usize) -> SlotView<'_> {
        match &self.slots[i] {
            Slot::Empty => SlotView::Empty,
            Slot::Ready(p) => SlotView::Ready(p),
            Slot::Busy(b) => SlotView::Busy(b.page),
        }
    }

    /// Slots the hand reaches before this one, in sweep order.
    pub fn distance(&self, slot: usize) -> usize {
        (slot + self.slots.len() - self.hand) % self.slots.len()
    }

    pub fn ready_pages(&self) -> impl Iterator<Item = (usize, &CachePage)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| match s {
            Slot::Ready(p) => Some((i, p)),
            _ => None,
        })
    }

    fn find(&self, page: PageId) -> Option<usize> {
        self.slots.iter().position(|s| s.page() == Some(page))
    }

    fn ready_mut(&mut self, slot: usize) -> Option<&mut CachePage> {
        match &mut self.slots[slot] {
            Slot::Ready(p) => Some(p),
            _ => None,
        }
    }

    /// Slot for an incoming page: an empty slot if any, else the GClock
    /// victim among clean ready pages, else among all ready pages.
    fn choose_slot(&mut self) -> Option<usize> {
        if let Some(i) = self.slots.iter().position(|s| matches!(s, Slot::Empty)) {
            return Some(i);
        }
        let n = self.slots.len();
        let mut hits = [0u8; MAX_SET_SIZE];
        let mut clean = [false; MAX_SET_SIZE];
        let mut ready = [false; MAX_SET_SIZE];
        for (i, s) in self.slots.iter().enumerate() {
            if let Slot::Ready(p) = s {
                hits[i] = p.hits;
                ready[i] = true;
                clean[i] = !p.dirty;
            }
        }
        let eligible = if clean[..n].iter().any(|&c| c) {
            &clean[..n]
        } else {
            &ready[..n]
        };
        let victim = gclock_sweep(&mut hits[..n], eligible, &mut self.hand)?;
        for (i, s) in self.slots.iter_mut().enumerate() {
            if let Slot::Ready(p) = s {
                p.hits = hits[i];
            }
        }
        Some(victim)
    }

    fn recount_dirty(&self) -> usize {
        self.ready_pages().filter(|(_, p)| p.dirty).count()
    }
}

/// One GClock decision over a set.
///
/// Starting at `hand`, the sweep visits slots in order; an eligible slot with
/// a zero count is the victim, an eligible slot with a positive count is
/// decremented and passed. Ineligible slots are skipped untouched. On return
/// the hand points just past the victim. `None` if nothing is eligible.
pub fn gclock_sweep(hits: &mut [u8], eligible: &[bool], hand: &mut usize) -> Option<usize> {
    let n = hits.len();
    debug_assert_eq!(n, eligible.len());
    if !eligible.iter().any(|&e| e) {
        return None;
    }
    loop {
        let i = *hand;
        *hand = (i + 1) % n;
        if eligible[i] {
            if hits[i] == 0 {
                return Some(i);
            }
            hits[i] -= 1;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub clean_evictions: u64,
    pub dirty_evictions: u64,
    /// Dirty evictions that happened while a clean page was present.
    pub dirty_evictions_with_clean: u64,
}

/// Most recent eviction, for tests and tracing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Eviction {
    pub set: usize,
    pub slot: usize,
    pub page: PageId,
    pub dirty: bool,
}

#[derive(Debug, Clone)]
pub struct PageCache {
    cfg: CacheConfig,
    sets: Vec<PageSet>,
    stats: CacheStats,
    last_eviction: Option<Eviction>,
}

impl PageCache {
    pub fn new(cfg: CacheConfig) -> Result<Self, String> {
        cfg.validate()?;
        let sets = (0..cfg.num_sets()).map(|_| PageSet::new(cfg.set_size)).collect();
        Ok(Self {
            cfg,
            sets,
            stats: CacheStats::default(),
            last_eviction: None,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn dirty_pages(&self) -> u64 {
        self.sets.iter().map(|s| s.dirty_count as u64).sum()
    }

    pub fn last_eviction(&self) -> Option<Eviction> {
        self.last_eviction
    }

    pub fn set(&self, idx: usize) -> &PageSet {
        &self.sets[idx]
    }

    /// Set a page hashes to.
    #[inline]
    pub fn lookup_set(&self, page: PageId) -> usize {
        let h = page.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ((h ^ (h >> 31)) % self.sets.len() as u64) as usize
    }

    /// Ready copy of a page, if resident and not waiting on I/O.
    pub fn resident(&self, page: PageId) -> Option<&CachePage> {
        let set = &self.sets[self.lookup_set(page)];
        set.find(page).and_then(|i| match &set.slots[i] {
            Slot::Ready(p) => Some(p),
            _ => None,
        })
    }

    pub fn read(&mut self, token: u64, page: PageId, partial: bool, out: &mut Vec<CacheEffect>) {
        debug_assert!(!partial, "reads always cover whole pages in this model");
        self.access(Access::new(token, page, AccessKind::Read, 0), out);
    }

    pub fn write(&mut self, token: u64, page: PageId, partial: bool, tag: u64, out: &mut Vec<CacheEffect>) {
        let kind = if partial {
            AccessKind::WritePartial
        } else {
            AccessKind::WriteFull
        };
        self.access(Access::new(token, page, kind, tag), out);
    }

    pub fn access(&mut self, mut acc: Access, out: &mut Vec<CacheEffect>) {
        let set_idx = self.lookup_set(acc.page);
        let cap = self.cfg.gclock_cap;
        let set = &mut self.sets[set_idx];
        if let Some(slot) = set.find(acc.page) {
            if !acc.counted {
                self.stats.hits += 1;
                acc.counted = true;
            }
            match &mut set.slots[slot] {
                Slot::Ready(p) => {
                    p.hits = p.hits.saturating_add(1).min(cap);
                    apply(set_idx, &mut set.dirty_count, p, acc, out);
                }
                Slot::Busy(b) => b.waiters.push(acc),
                Slot::Empty => unreachable!(),
            }
            return;
        }
        if !set.waiters.is_empty() {
            set.waiters.push_back(acc);
            return;
        }
        if !self.miss(set_idx, acc, out) {
            self.sets[set_idx].waiters.push_back(acc);
        }
    }

    /// Places a missing page; false if every slot is busy.
    fn miss(&mut self, set_idx: usize, mut acc: Access, out: &mut Vec<CacheEffect>) -> bool {
        let initial = self.cfg.initial_hits;
        let set = &mut self.sets[set_idx];
        let Some(slot) = set.choose_slot() else {
            return false;
        };
        if !acc.counted {
            self.stats.misses += 1;
        }
        acc.counted = true;
        let old = std::mem::replace(&mut set.slots[slot], Slot::Empty);
        let victim_dirty = match old {
            Slot::Ready(victim) => {
                let clean_present = set.ready_pages().any(|(_, p)| !p.dirty);
                self.last_eviction = Some(Eviction {
                    set: set_idx,
                    slot,
                    page: victim.page,
                    dirty: victim.dirty,
                });
                if victim.dirty {
                    self.stats.dirty_evictions += 1;
                    if clean_present {
                        self.stats.dirty_evictions_with_clean += 1;
                    }
                    set.dirty_count -= 1;
                    out.push(CacheEffect::Writeback {
                        page: victim.page,
                        tag: victim.data_tag,
                        set: set_idx,
                        slot,
                    });
                    true
                } else {
                    self.stats.clean_evictions += 1;
                    false
                }
            }
            Slot::Empty => false,
            Slot::Busy(_) => unreachable!("busy slots are never chosen"),
        };
        if victim_dirty {
            set.slots[slot] = Slot::Busy(BusySlot {
                page: acc.page,
                phase: BusyPhase::AwaitWriteback,
                first: acc,
                waiters: Vec::new(),
            });
        } else if acc.kind.needs_fill() {
            set.slots[slot] = Slot::Busy(BusySlot {
                page: acc.page,
                phase: BusyPhase::Filling,
                first: acc,
                waiters: Vec::new(),
            });
            out.push(CacheEffect::Fill {
                page: acc.page,
                set: set_idx,
                slot,
            });
        } else {
            install_written(set, set_idx, slot, acc, initial, out);
        }
        true
    }

    /// The blocking writeback of the victim that used to occupy `slot` finished.
    pub fn on_writeback_done(&mut self, set_idx: usize, slot: usize, out: &mut Vec<CacheEffect>) {
        let initial = self.cfg.initial_hits;
        let set = &mut self.sets[set_idx];
        let Slot::Busy(busy) = &mut set.slots[slot] else {
            panic!("writeback completion for a slot that is not busy");
        };
        debug_assert_eq!(busy.phase, BusyPhase::AwaitWriteback);
        if busy.first.kind.needs_fill() {
            busy.phase = BusyPhase::Filling;
            out.push(CacheEffect::Fill {
                page: busy.page,
                set: set_idx,
                slot,
            });
            return;
        }
        let Slot::Busy(busy) = std::mem::replace(&mut set.slots[slot], Slot::Empty) else {
            unreachable!()
        };
        install_written(set, set_idx, slot, busy.first, initial, out);
        self.replay(set_idx, busy.waiters, out);
    }

    /// The device read for the page reserved in `slot` finished with `device_tag`.
    pub fn on_fill_done(&mut self, set_idx: usize, slot: usize, device_tag: u64, out: &mut Vec<CacheEffect>) {
        let set = &mut self.sets[set_idx];
        let Slot::Busy(busy) = std::mem::replace(&mut set.slots[slot], Slot::Empty) else {
            panic!("fill completion for a slot that is not busy");
        };
        debug_assert_eq!(busy.phase, BusyPhase::Filling);
        let mut page = CachePage {
            page: busy.page,
            dirty: false,
            hits: self.cfg.initial_hits,
            dirty_version: 0,
            data_tag: device_tag,
            flush: None,
        };
        apply(set_idx, &mut set.dirty_count, &mut page, busy.first, out);
        set.slots[slot] = Slot::Ready(page);
        self.replay(set_idx, busy.waiters, out);
    }

    fn replay(&mut self, set_idx: usize, waiters: Vec<Access>, out: &mut Vec<CacheEffect>) {
        for acc in waiters {
            self.access(acc, out);
        }
        self.drain_set_waiters(set_idx, out);
    }

    /// Retries accesses that found every slot of the set busy.
    fn drain_set_waiters(&mut self, set_idx: usize, out: &mut Vec<CacheEffect>) {
        while let Some(acc) = self.sets[set_idx].waiters.pop_front() {
            if self.sets[set_idx].find(acc.page).is_some() {
                self.access(acc, out);
            } else if !self.miss(set_idx, acc, out) {
                self.sets[set_idx].waiters.push_front(acc);
                return;
            }
        }
    }

    /// Clean a page after its data reached the device, unless it was
    /// re-dirtied since `version` was captured. Unknown pages are ignored.
    pub fn mark_clean(&mut self, page: PageId, version: u64) -> bool {
        let set_idx = self.lookup_set(page);
        let set = &mut self.sets[set_idx];
        let Some(slot) = set.find(page) else { return false };
        let Some(p) = set.ready_mut(slot) else { return false };
        if p.dirty && p.dirty_version == version {
            p.dirty = false;
            set.dirty_count -= 1;
            true
        } else {
            false
        }
    }

    /// Attach a flush request to a resident page.
    pub fn set_flush_pending(&mut self, set_idx: usize, slot: usize, id: u64) {
        let p = self.sets[set_idx].ready_mut(slot).expect("flush target must be ready");
        debug_assert!(p.flush.is_none());
        p.flush = Some(id);
    }

    /// Detach flush request `id` from its page, cleaning the page when the
    /// request completed and `version` still matches. Returns true if the
    /// page was cleaned.
    pub fn finish_flush(&mut self, page: PageId, id: u64, completed: bool, version: u64) -> bool {
        let set_idx = self.lookup_set(page);
        let set = &self.sets[set_idx];
        let Some(slot) = set.find(page) else { return false };
        match self.sets[set_idx].ready_mut(slot) {
            Some(p) if p.flush == Some(id) => p.flush = None,
            _ => return false,
        }
        completed && self.mark_clean(page, version)
    }

    /// Rank of `slot` among the set's ready pages by ascending
    /// `hits * set_size + distance` (ties by slot): the page the clock
    /// would reach first gets the highest rank, `ready - 1`.
    pub fn resident_rank(&self, set_idx: usize, slot: usize) -> u32 {
        let set = &self.sets[set_idx];
        let n = self.cfg.set_size;
        let Slot::Ready(me) = &set.slots[slot] else { return 0 };
        let mine = (me.hits as usize * n + set.distance(slot), slot);
        let mut below = 0u32;
        let mut total = 0u32;
        for (i, p) in set.ready_pages() {
            total += 1;
            if (p.hits as usize * n + set.distance(i), i) > mine {
                below += 1;
            }
        }
        // `below` pages rank lower; rank counts from 0 at the least urgent.
        debug_assert!(total > 0);
        below
    }

    /// Dirty data of a resident page, for reconstructing the latest image.
    pub fn dirty_tag(&self, page: PageId) -> Option<u64> {
        self.resident(page).filter(|p| p.dirty).map(|p| p.data_tag)
    }

    /// Checks the cached dirty count and hand of one set.
    pub fn verify_set(&self, set_idx: usize) -> Result<(), String> {
        let set = &self.sets[set_idx];
        if set.recount_dirty() != set.dirty_count {
            return Err(format!(
                "set {set_idx}: dirty_count {} but {} dirty pages",
                set.dirty_count,
                set.recount_dirty()
            ));
        }
        if set.hand >= set.slots.len() {
            return Err(format!("set {set_idx}: hand {} out of range", set.hand));
        }
        for (_, p) in set.ready_pages() {
            if p.hits > self.cfg.gclock_cap {
                return Err(format!("set {set_idx}: hits {} above cap", p.hits));
            }
        }
        Ok(())
    }

    pub fn verify_all(&self) -> Result<(), String> {
        (0..self.sets.len()).try_for_each(|s| self.verify_set(s))
    }
}

impl FlushView for PageCache {
    fn flush_state(&self, page: PageId, set_idx: usize) -> Option<PageFlushState> {
        let set = &self.sets[set_idx];
        let slot = set.find(page)?;
        let Slot::Ready(p) = &set.slots[slot] else { return None };
        Some(PageFlushState {
            dirty: p.dirty,
            dirty_version: p.dirty_version,
            flush_score: self.resident_rank(set_idx, slot),
        })
    }
}

fn apply(set_idx: usize, dirty_count: &mut usize, page: &mut CachePage, acc: Access, out: &mut Vec<CacheEffect>) {
    match acc.kind {
        AccessKind::Read => out.push(CacheEffect::Complete {
            token: acc.token,
            page: page.page,
            read_tag: Some(page.data_tag),
        }),
        AccessKind::WriteFull | AccessKind::WritePartial => {
            if !page.dirty {
                page.dirty = true;
                *dirty_count += 1;
            }
            page.dirty_version = acc.tag;
            page.data_tag = acc.tag;
            out.push(CacheEffect::Applied {
                page: page.page,
                tag: acc.tag,
            });
            out.push(CacheEffect::Dirtied { set: set_idx });
            out.push(CacheEffect::Complete {
                token: acc.token,
                page: page.page,
                read_tag: None,
            });
        }
    }
}

fn install_written(set: &mut PageSet, set_idx: usize, slot: usize, acc: Access, initial: u8, out: &mut Vec<CacheEffect>) {
    debug_assert_eq!(acc.kind, AccessKind::WriteFull);
    let mut page = CachePage {
        page: acc.page,
        dirty: false,
        hits: initial,
        dirty_version: 0,
        data_tag: 0,
        flush: None,
    };
    apply(set_idx, &mut set.dirty_count, &mut page, acc, out);
    set.slots[slot] = Slot::Ready(page);
}
