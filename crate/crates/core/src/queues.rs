//! Per-SSD dual-priority request queues.
//!
//! Application traffic (reads and blocking victim writebacks) goes to a short
//! high-priority FIFO; flusher writes go to a long low-priority FIFO. The
//! issuing side drains the high FIFO first and only touches the low FIFO when
//! the high one is empty. A fixed number of device slots is never handed to
//! low-priority requests, so an arriving application request always finds a
//! slot unless application requests already fill them.

use std::collections::VecDeque;

use crate::engine::SimTime;
use crate::mapping::PageId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueConfig {
    pub high_capacity: usize,
    pub low_capacity: usize,
    pub reserved_high_slots: u32,
    pub max_outstanding: u32,
    /// Flush requests whose page ranks below this flush score are dropped.
    pub discard_threshold: u32,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            high_capacity: 64,
            low_capacity: 4096,
            reserved_high_slots: 7,
            max_outstanding: 32,
            // Keeps only the two most evictable pages of a 12-page set,
            // matching the flusher's batch; see the README sensitivity table.
            discard_threshold: 10,
        }
    }
}

impl QueueConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.high_capacity == 0 || self.low_capacity == 0 {
            return Err("queue capacities must be positive".into());
        }
        if self.reserved_high_slots >= self.max_outstanding {
            return Err("reserved_high_slots must be below max_outstanding".into());
        }
        Ok(())
    }

    pub fn low_slot_cap(&self) -> u32 {
        self.max_outstanding - self.reserved_high_slots
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Cache fill for an application read or a read-update-write.
    AppRead,
    /// Dirty victim written back while an application op waits on it.
    BlockingWriteback,
    /// Uncached application write.
    Direct,
}

/// What the engine does when a device request completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Fill { set: usize, slot: usize },
    Writeback { set: usize, slot: usize },
    DirectOp { op: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoRequest {
    pub page: PageId,
    pub direction: Direction,
    pub origin: Origin,
    pub submit_time: SimTime,
    pub completion: Completion,
    /// Data tag carried by a write.
    pub tag: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushRequest {
    pub id: u64,
    pub page: PageId,
    pub set: usize,
    /// Dirty generation of the page when the request was created.
    pub dirty_version: u64,
    pub flush_score: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    Evicted,
    Cleaned,
    LowScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaleCheck {
    Keep,
    Drop(DiscardReason),
}

/// Cache state of a flush target as seen from the issuing side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageFlushState {
    pub dirty: bool,
    pub dirty_version: u64,
    pub flush_score: u32,
}

pub trait FlushView {
    /// `None` when the page is not resident (or not yet usable) in `set`.
    fn flush_state(&self, page: PageId, set: usize) -> Option<PageFlushState>;
}

/// Decides whether a flush request that reached the queue head is still worth issuing.
pub fn discard_stale<V: FlushView + ?Sized>(req: &FlushRequest, view: &V, threshold: u32) -> StaleCheck {
    let Some(state) = view.flush_state(req.page, req.set) else {
        return StaleCheck::Drop(DiscardReason::Evicted);
    };
    if !state.dirty || state.dirty_version != req.dirty_version {
        return StaleCheck::Drop(DiscardReason::Cleaned);
    }
    if state.flush_score < threshold {
        return StaleCheck::Drop(DiscardReason::LowScore);
    }
    StaleCheck::Keep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Priority {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Issue {
    High(IoRequest),
    Low(FlushRequest),
}

#[derive(Debug, Default)]
pub struct DispatchOutcome {
    pub issued: Vec<Issue>,
    pub discarded: Vec<(FlushRequest, DiscardReason)>,
    /// Set when something was discarded: the flusher should top the queue up.
    pub refill: bool,
}

impl DispatchOutcome {
    pub fn clear(&mut self) {
        self.issued.clear();
        self.discarded.clear();
        self.refill = false;
    }
}

/// Rejected enqueue; hands the request back to the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueFull<T>(pub T);

#[derive(Debug, Clone)]
pub struct DualQueue {
    cfg: QueueConfig,
    high: VecDeque<IoRequest>,
    low: VecDeque<FlushRequest>,
    in_flight_high: u32,
    in_flight_low: u32,
}

impl DualQueue {
    pub fn new(cfg: QueueConfig) -> Self {
        Self {
            high: VecDeque::with_capacity(cfg.high_capacity),
            low: VecDeque::new(),
            in_flight_high: 0,
            in_flight_low: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &QueueConfig {
        &self.cfg
    }

    pub fn high_len(&self) -> usize {
        self.high.len()
    }

    pub fn low_len(&self) -> usize {
        self.low.len()
    }

    pub fn in_flight_high(&self) -> u32 {
        self.in_flight_high
    }

    pub fn in_flight_low(&self) -> u32 {
        self.in_flight_low
    }

    pub fn in_flight(&self) -> u32 {
        self.in_flight_high + self.in_flight_low
    }

    pub fn low_has_room(&self) -> bool {
        self.low.len() < self.cfg.low_capacity
    }

    pub fn high_has_room(&self) -> bool {
        self.high.len() < self.cfg.high_capacity
    }

    pub fn enqueue_high(&mut self, req: IoRequest) -> Result<(), QueueFull<IoRequest>> {
        if !self.high_has_room() {
            return Err(QueueFull(req));
        }
        self.high.push_back(req);
        Ok(())
    }

    pub fn enqueue_low(&mut self, req: FlushRequest) -> Result<(), QueueFull<FlushRequest>> {
        if !self.low_has_room() {
            return Err(QueueFull(req));
        }
        self.low.push_back(req);
        Ok(())
    }

    /// One issuing pass: moves requests from the FIFOs into free device slots.
    ///
    /// A pass that finds application requests waiting issues only those; the
    /// low FIFO is served by a later pass that starts with the high FIFO
    /// empty. Issued requests count as in flight until
    /// [`DualQueue::complete`]. Low-priority heads are checked for staleness
    /// as they are popped; the dropped ones are reported in `out.discarded`.
    pub fn dispatch<V: FlushView + ?Sized>(&mut self, view: &V, out: &mut DispatchOutcome) {
        if !self.high.is_empty() {
            while self.in_flight() < self.cfg.max_outstanding {
                let Some(req) = self.high.pop_front() else { break };
                self.in_flight_high += 1;
                out.issued.push(Issue::High(req));
            }
            return;
        }
        let low_cap = self.cfg.low_slot_cap();
        while self.in_flight() < self.cfg.max_outstanding && self.in_flight_low < low_cap {
            let Some(req) = self.low.pop_front() else { break };
            match discard_stale(&req, view, self.cfg.discard_threshold) {
                StaleCheck::Keep => {
                    self.in_flight_low += 1;
                    out.issued.push(Issue::Low(req));
                }
                StaleCheck::Drop(reason) => {
                    out.discarded.push((req, reason));
                    out.refill = true;
                }
            }
        }
    }

    pub fn complete(&mut self, class: Priority) {
        match class {
            Priority::High => {
                debug_assert!(self.in_flight_high > 0);
                self.in_flight_high -= 1;
            }
            Priority::Low => {
                debug_assert!(self.in_flight_low > 0);
                self.in_flight_low -= 1;
            }
        }
    }

    /// Slot caps plus the post-dispatch guarantees: a waiting high request
    /// implies every slot is busy, and a waiting low request implies either
    /// every slot or every low slot is busy.
    pub fn check_settled(&self) -> Result<(), String> {
        let max = self.cfg.max_outstanding;
        if self.in_flight() > max {
            return Err(format!("{} requests in flight, cap {max}", self.in_flight()));
        }
        if self.in_flight_low > self.cfg.low_slot_cap() {
            return Err(format!(
                "{} low requests in flight, cap {}",
                self.in_flight_low,
                self.cfg.low_slot_cap()
            ));
        }
        if !self.high.is_empty() && self.in_flight() < max {
            return Err("high request waiting while a slot is free".into());
        }
        if self.high.is_empty()
            && !self.low.is_empty()
            && self.in_flight() < max
            && self.in_flight_low < self.cfg.low_slot_cap()
        {
            return Err("low request waiting while a low slot is free".into());
        }
        Ok(())
    }
}
